"""Backbone: spec validation, fusion arithmetic, trace shapes, head freeze."""

import numpy as np
import pytest
import torch

import oracles
from attnadapt.backbone import (AttentionFusionBackbone, BlockSpec,
                                ClassifierHead, fuse, l2_normalize_rows)
from attnadapt.errors import ConfigurationError, ContractViolationError


def small_spec(**kw):
    base = dict(channels=(8, 16), downsample=(1, 2), latent_dim=16,
                num_classes=3, reduction=(2, 2))
    base.update(kw)
    return BlockSpec(**base)


class TestBlockSpec:
    def test_defaults(self):
        spec = BlockSpec(num_classes=5)
        assert spec.channels == (16, 32, 64, 128)
        assert spec.downsample == (1, 2, 2, 2)
        assert spec.num_blocks == 4

    def test_too_few_blocks(self):
        with pytest.raises(ConfigurationError):
            BlockSpec(channels=(8,), downsample=(1,), num_classes=2, latent_dim=8)

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            BlockSpec(channels=(8, 16), downsample=(1,), num_classes=2, latent_dim=8)

    def test_decreasing_channels(self):
        with pytest.raises(ConfigurationError):
            BlockSpec(channels=(16, 8), downsample=(1, 2), num_classes=2, latent_dim=8)

    def test_latent_narrower_than_classes(self):
        with pytest.raises(ConfigurationError):
            BlockSpec(channels=(8, 16), downsample=(1, 2), num_classes=9, latent_dim=8)

    def test_extent_tracking(self):
        spec = small_spec()
        assert spec.block_extents(16, 16) == [(16, 16), (8, 8)]

    def test_extent_indivisible(self):
        spec = small_spec()
        with pytest.raises(ConfigurationError):
            spec.block_extents(15, 16)

    def test_extent_too_small_after_stride(self):
        spec = small_spec()
        with pytest.raises(ConfigurationError):
            spec.block_extents(4, 4)  # second block would be 2x2

    def test_metadata_round_trip(self):
        spec = small_spec()
        assert BlockSpec.from_metadata(spec.to_metadata()) == spec


class TestFuse:
    def test_average(self):
        a = torch.tensor([[2.0, 4.0]])
        b = torch.tensor([[6.0, 0.0]])
        torch.testing.assert_close(fuse(a, b), torch.tensor([[4.0, 2.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            fuse(torch.zeros(1, 2), torch.zeros(2, 1))

    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(2, 3, 4, 4))
        b = rng.normal(size=(2, 3, 4, 4))
        out = fuse(torch.tensor(a), torch.tensor(b)).numpy()
        np.testing.assert_allclose(out, 0.5 * (a + b), atol=1e-15)


class TestNormalize:
    def test_unit_rows(self):
        torch.manual_seed(0)
        x = torch.randn(5, 8)
        norms = l2_normalize_rows(x).norm(dim=1)
        torch.testing.assert_close(norms, torch.ones(5))

    def test_zero_row_passthrough(self):
        x = torch.zeros(2, 4)
        x[1] = torch.tensor([3.0, 0.0, 4.0, 0.0])
        out = l2_normalize_rows(x)
        assert torch.equal(out[0], torch.zeros(4))
        torch.testing.assert_close(out[1], torch.tensor([0.6, 0.0, 0.8, 0.0]))


class TestForward:
    def test_trace_shapes(self):
        torch.manual_seed(0)
        model = AttentionFusionBackbone(small_spec())
        trace = model(torch.rand(4, 3, 16, 16))
        assert trace.z.shape == (4, 16)
        assert trace.logits.shape == (4, 3)
        assert len(trace.layer_logits) == 2
        assert all(t.shape == (4, 3) for t in trace.layer_logits)
        assert trace.fused.shape == (4, 16, 8, 8)
        assert len(trace.saliency) == 2

    def test_z_unit_norm(self):
        torch.manual_seed(1)
        model = AttentionFusionBackbone(small_spec())
        trace = model(torch.rand(8, 3, 16, 16))
        torch.testing.assert_close(trace.z.norm(dim=1), torch.ones(8))

    def test_incompatible_extent(self):
        model = AttentionFusionBackbone(small_spec())
        with pytest.raises(ConfigurationError):
            model(torch.rand(1, 3, 10, 10))  # 5x5 after stride 2

    def test_recurrence_wiring(self):
        """Forward equals a manual replay of the documented recurrence."""
        torch.manual_seed(2)
        spec = BlockSpec(channels=(4, 8, 8), downsample=(1, 2, 1),
                         latent_dim=8, num_classes=4, reduction=(2, 2, 2))
        model = AttentionFusionBackbone(spec).eval()
        x = torch.rand(2, 3, 8, 8)
        with torch.no_grad():
            trace = model(x)
            f = model.stem(x)
            fused = None
            for i in range(3):
                f = model.blocks[i](f)
                sal = model.attention[i].spatial(f)
                _, gate = model.attention[i].channel(f)
                f_bar = sal * f * gate[:, :, None, None] + f
                if fused is None:
                    fused = f_bar
                else:
                    fused = 0.5 * (model.connect[i - 1](fused) + f_bar)
            z = l2_normalize_rows(model.latent(fused.mean(dim=(2, 3))))
        torch.testing.assert_close(trace.fused, fused)
        torch.testing.assert_close(trace.z, z)
        torch.testing.assert_close(trace.logits, model.head(z))

    def test_residual_projection_matches_conv_oracle(self):
        """The cross-layer connector is exactly a strided 1x1 convolution."""
        torch.manual_seed(3)
        model = AttentionFusionBackbone(small_spec()).double()
        f = torch.randn(2, 8, 6, 6, dtype=torch.float64)
        out = model.residual_connect(f, 1)
        conv = model.connect[0].proj
        expected = oracles.conv2d(f.numpy(), conv.weight.detach().numpy(),
                                  conv.bias.detach().numpy(), stride=2)
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-12)

    def test_residual_connect_bounds(self):
        model = AttentionFusionBackbone(small_spec())
        with pytest.raises(ConfigurationError):
            model.residual_connect(torch.zeros(1, 8, 4, 4), 0)
        with pytest.raises(ConfigurationError):
            model.residual_connect(torch.zeros(1, 16, 4, 4), 1)  # wrong channels


class TestHeadFreeze:
    def test_freeze_stops_gradients(self):
        torch.manual_seed(4)
        model = AttentionFusionBackbone(small_spec())
        model.head.freeze()
        assert model.head.frozen
        assert all(not p.requires_grad for p in model.head.parameters())
        trainable = model.backbone_parameters()
        head_ids = {id(p) for p in model.head.parameters()}
        assert all(id(p) not in head_ids for p in trainable)

    def test_mutation_detected(self):
        torch.manual_seed(5)
        model = AttentionFusionBackbone(small_spec())
        model.head.freeze()
        model.head.assert_unchanged()
        with torch.no_grad():
            model.head.weight[0, 0] += 1e-3
        with pytest.raises(ContractViolationError):
            model.head.assert_unchanged()

    def test_training_leaves_frozen_head_untouched(self):
        torch.manual_seed(6)
        model = AttentionFusionBackbone(small_spec())
        model.head.freeze()
        before = model.head.parameter_bytes()
        opt = torch.optim.SGD(model.backbone_parameters(), lr=0.1, momentum=0.9,
                              weight_decay=0.01)
        for _ in range(3):
            trace = model(torch.rand(4, 3, 16, 16))
            loss = trace.logits.square().mean() + trace.z.square().mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert model.head.parameter_bytes() == before
        model.head.assert_unchanged()

    def test_head_shape_check(self):
        head = ClassifierHead(8, 3)
        with pytest.raises(ConfigurationError):
            head(torch.zeros(2, 7))
