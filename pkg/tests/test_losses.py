"""Loss terms: closed forms, oracle equivalence, and the weighted mix."""

import math

import numpy as np
import pytest
import torch

import oracles
from attnadapt.centroids import PseudoLabels
from attnadapt.errors import ConfigurationError, NumericError
from attnadapt.losses import (LossReport, LossWeights, im_loss, source_ce,
                              ssd_loss, total_loss)


class TestSourceCe:
    def test_uniform_logits(self):
        logits = torch.zeros(6, 4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3, 0, 1])
        assert abs(float(source_ce(logits, labels)) - math.log(4)) < 1e-12

    def test_peaked_limit(self):
        logits = torch.zeros(2, 3, dtype=torch.float64)
        logits[0, 1] = 200.0
        logits[1, 2] = 200.0
        loss = float(source_ce(logits, torch.tensor([1, 2])))
        assert loss < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            logits = torch.tensor(rng.normal(size=(8, 5)))
            labels = torch.tensor(rng.integers(0, 5, size=8))
            got = float(source_ce(logits, labels))
            want = oracles.cross_entropy(logits.numpy(), labels.numpy())
            assert abs(got - want) < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(ConfigurationError):
            source_ce(torch.zeros(2, 3), torch.tensor([0, 3]))
        with pytest.raises(ConfigurationError):
            source_ce(torch.zeros(2, 3), torch.tensor([-1, 0]))


class TestSsdLoss:
    def test_kd_zero_for_identical(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 3, dtype=torch.float64)
        layers = [logits.clone(), logits.clone()]
        _, kd = ssd_loss(logits, layers, torch.tensor([0, 1, 2, 0]))
        assert abs(float(kd)) < 1e-12

    def test_ce_is_scaled_standard_ce(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(size=(6, 4)))
        labels = torch.tensor(rng.integers(0, 4, size=6))
        ce, _ = ssd_loss(logits, [logits.clone()], labels)
        standard = oracles.cross_entropy(logits.numpy(), labels.numpy())
        assert abs(float(ce) - standard / 4) < 1e-9

    def test_confident_correct_ce_vanishes(self):
        logits = torch.zeros(2, 5, dtype=torch.float64)
        logits[0, 3] = 500.0
        logits[1, 1] = 500.0
        ce, _ = ssd_loss(logits, [logits.clone()], torch.tensor([3, 1]))
        assert float(ce) < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            logits = torch.tensor(rng.normal(size=(5, 3)))
            layers = [torch.tensor(rng.normal(size=(5, 3))) for _ in range(2)]
            labels = torch.tensor(rng.integers(0, 3, size=5))
            ce, kd = ssd_loss(logits, layers, labels)
            o_ce, o_kd = oracles.ssd_loss(logits.numpy(),
                                          [l.numpy() for l in layers],
                                          labels.numpy())
            assert abs(float(ce) - o_ce) < 1e-9
            assert abs(float(kd) - o_kd) < 1e-9

    def test_kd_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            logits = torch.tensor(rng.normal(size=(4, 4)) * 3)
            layers = [torch.tensor(rng.normal(size=(4, 4)) * 3)]
            _, kd = ssd_loss(logits, layers, torch.zeros(4, dtype=torch.long))
            assert float(kd) >= -1e-12

    def test_final_block_switch(self):
        rng = np.random.default_rng(4)
        logits = torch.tensor(rng.normal(size=(3, 3)))
        layers = [torch.tensor(rng.normal(size=(3, 3))) for _ in range(3)]
        labels = torch.tensor([0, 1, 2])
        _, kd_all = ssd_loss(logits, layers, labels, kd_include_final=True)
        _, kd_trim = ssd_loss(logits, layers[:-1], labels, kd_include_final=True)
        _, kd_switch = ssd_loss(logits, layers, labels, kd_include_final=False)
        assert abs(float(kd_switch) - float(kd_trim)) < 1e-12
        assert float(kd_all) != pytest.approx(float(kd_switch))

    def test_teacher_defaults_to_detached_output(self):
        """kd pushes the block projections toward the output, not the
        output toward the blocks."""
        torch.manual_seed(1)
        logits = torch.randn(4, 3, requires_grad=True)
        layers = [torch.randn(4, 3, requires_grad=True)]
        ce, kd = ssd_loss(logits, layers, torch.tensor([0, 1, 2, 0]))
        kd.backward()
        assert layers[0].grad is not None
        assert logits.grad is None

    def test_explicit_teacher_differentiable(self):
        torch.manual_seed(2)
        teacher = torch.randn(4, 3, requires_grad=True)
        logits = torch.randn(4, 3, requires_grad=True)
        layers = [torch.randn(4, 3, requires_grad=True)]
        _, kd = ssd_loss(logits, layers, torch.tensor([0, 1, 2, 0]),
                         teacher_logits=teacher)
        kd.backward()
        assert teacher.grad is not None

    def test_accepts_pseudo_labels_type(self):
        logits = torch.zeros(2, 3, dtype=torch.float64)
        pseudo = PseudoLabels(torch.tensor([0, 2]), torch.ones(2))
        ce, _ = ssd_loss(logits, [logits.clone()], pseudo)
        assert abs(float(ce) - math.log(3) / 3) < 1e-12

    def test_validation(self):
        logits = torch.zeros(2, 3)
        with pytest.raises(ConfigurationError):
            ssd_loss(logits, [], torch.tensor([0, 1]))
        with pytest.raises(ConfigurationError):
            ssd_loss(logits, [torch.zeros(2, 4)], torch.tensor([0, 1]))
        with pytest.raises(ConfigurationError):
            ssd_loss(logits, [logits], torch.tensor([0, 5]))
        with pytest.raises(ConfigurationError):
            ssd_loss(logits, [logits], torch.tensor([0, 1]),
                     kd_include_final=False)


class TestImLoss:
    def test_one_hot_same_class_is_zero(self):
        logits = torch.zeros(8, 4, dtype=torch.float64)
        logits[:, 2] = 2000.0
        assert abs(float(im_loss(logits))) < 1e-12

    def test_uniform_predictions_cancel(self):
        logits = torch.zeros(6, 2, dtype=torch.float64)
        assert abs(float(im_loss(logits))) < 1e-12

    def test_one_hot_balanced_is_minus_log_k(self):
        for k in (2, 4, 5):
            rows = []
            for i in range(2 * k):
                row = torch.zeros(k, dtype=torch.float64)
                row[i % k] = 2000.0
                rows.append(row)
            logits = torch.stack(rows)
            assert abs(float(im_loss(logits)) + math.log(k)) < 1e-9

    def test_range_bound(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            b = int(rng.integers(1, 9))
            k = int(rng.integers(2, 7))
            logits = torch.tensor(rng.normal(size=(b, k)) * rng.uniform(0.1, 30))
            val = float(im_loss(logits))
            assert -math.log(k) - 1e-9 <= val <= math.log(k) + 1e-9

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            logits = torch.tensor(rng.normal(size=(7, 4)))
            got = float(im_loss(logits))
            want = oracles.im_loss(logits.numpy())
            assert abs(got - want) < 1e-9


class TestTotalLoss:
    def test_baseline_reduction(self):
        w = LossWeights(alpha=0.0, beta=0.0)
        total = total_loss(torch.tensor(1.25), torch.tensor(9.0),
                           torch.tensor(9.0), torch.tensor(9.0), w)
        assert float(total) == pytest.approx(1.25)

    def test_arithmetic(self):
        w = LossWeights(alpha=1.0, beta=0.5)
        total = total_loss(1.0, 1.5, 0.5, 3.0, w)
        assert float(total) == pytest.approx(4.5)

    def test_defaults(self):
        w = LossWeights()
        assert w.alpha == 1.0
        assert w.beta == 0.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(alpha=-0.1)

    def test_non_finite_named(self):
        w = LossWeights()
        with pytest.raises(NumericError, match="kd"):
            total_loss(1.0, 1.0, float("nan"), 1.0, w)
        with pytest.raises(NumericError, match="gac"):
            total_loss(1.0, 1.0, 1.0, float("inf"), w)

    def test_gradient_flows(self):
        im = torch.tensor(0.5, requires_grad=True)
        total = total_loss(im, torch.tensor(1.0), torch.tensor(1.0),
                           torch.tensor(1.0), LossWeights())
        total.backward()
        assert im.grad is not None


class TestLossReport:
    def test_identity_enforced(self):
        LossReport(im=1.0, ce=1.5, kd=0.5, gac=3.0, total=4.5)
        with pytest.raises(ConfigurationError):
            LossReport(im=1.0, ce=1.5, kd=0.5, gac=3.0, total=4.6)

    def test_from_terms(self):
        rep = LossReport.from_terms(1.0, 2.0, 0.0, 3.0,
                                    LossWeights(alpha=1.0, beta=0.5))
        assert rep.total == pytest.approx(4.5)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError, match="im"):
            LossReport(im=float("nan"), ce=0.0, kd=0.0, gac=0.0, total=0.0)
