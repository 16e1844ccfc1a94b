"""Training objectives.

Four scalars drive the two training phases: plain cross-entropy for
source pretraining, and for adaptation a pseudo-label self-distillation
pair (ce, kd), an information-maximization term, and the contrastive
term computed in `contrast`.  All functions take logits and return
differentiable scalars.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .centroids import PseudoLabels
from .errors import ConfigurationError, NumericError

TOTAL_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights for the adaptation objective:
    total = im + alpha * (ce + kd) + beta * gac."""

    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(
                f"loss weights must be nonnegative, got alpha={self.alpha} "
                f"beta={self.beta}")


@dataclass(frozen=True)
class LossReport:
    """One training step's scalar terms, with the mix identity enforced."""

    im: float
    ce: float
    kd: float
    gac: float
    total: float
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        for name in ("im", "ce", "kd", "gac", "total"):
            value = getattr(self, name)
            if not torch.isfinite(torch.tensor(value)):
                raise NumericError(f"loss term {name!r} is not finite: {value}")
        expected = (self.im + self.weights.alpha * (self.ce + self.kd)
                    + self.weights.beta * self.gac)
        if abs(self.total - expected) > TOTAL_TOLERANCE * max(1.0, abs(expected)):
            raise ConfigurationError(
                f"total {self.total} does not match recomputed mix {expected}")

    @classmethod
    def from_terms(cls, im, ce, kd, gac, weights: LossWeights) -> "LossReport":
        im, ce, kd, gac = (float(v) for v in (im, ce, kd, gac))
        total = im + weights.alpha * (ce + kd) + weights.beta * gac
        return cls(im=im, ce=ce, kd=kd, gac=gac, total=total, weights=weights)


def _check_logits(logits: torch.Tensor, name: str = "logits") -> None:
    if logits.dim() != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ConfigurationError(
            f"{name} must be (batch, classes) with batch >= 1 and classes >= 2, "
            f"got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite {name}")


def source_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    _check_logits(logits)
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ConfigurationError("labels must be 1-d and match the batch size")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ConfigurationError("label out of range")
    return F.cross_entropy(logits, labels)


def _xlogx(p: torch.Tensor) -> torch.Tensor:
    """p * log(p) with the 0 * log 0 = 0 convention."""
    return torch.where(p > 0, p * torch.log(p.clamp_min(1e-300)), torch.zeros_like(p))


def _xlogx_pair(p: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    """p * log_p where log_p = log(p), guarded so exact zeros contribute 0."""
    return torch.where(p > 0, p * log_p, torch.zeros_like(p))


def ssd_loss(logits: torch.Tensor, layer_logits: list[torch.Tensor],
             pseudo, kd_include_final: bool = True,
             teacher_logits: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pseudo-label self-distillation pair.

    ce: cross-entropy against the pseudo-labels scaled by 1/K.  The 1/K
    is deliberate; the mixing weight alpha is calibrated against it.
    kd: sum over blocks of the batch-mean KL divergence from each block's
    class distribution to the teacher distribution.  The teacher defaults
    to the output logits held constant for the step: knowledge flows from
    the output into the per-block projections, never the reverse (a live
    teacher lets the distillation term flatten the classifier instead).
    With kd_include_final=False the last block is left out of the sum.
    """
    _check_logits(logits)
    if not layer_logits:
        raise ConfigurationError("need at least one block of layer logits")
    labels = pseudo.labels if isinstance(pseudo, PseudoLabels) else pseudo
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ConfigurationError("pseudo-labels must be 1-d and match the batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ConfigurationError("pseudo-label out of range")
    k = logits.shape[1]
    ce = F.cross_entropy(logits, labels) / k

    blocks = layer_logits if kd_include_final else layer_logits[:-1]
    if not blocks:
        raise ConfigurationError("kd_include_final=False removed the only block")
    if teacher_logits is None:
        teacher_logits = logits.detach()
    if teacher_logits.shape != logits.shape:
        raise ConfigurationError(
            f"teacher logits shape {tuple(teacher_logits.shape)} does not match "
            f"output {tuple(logits.shape)}")
    log_pt = F.log_softmax(teacher_logits, dim=1)
    kd = logits.new_zeros(())
    for i, pl_logits in enumerate(blocks):
        if pl_logits.shape != logits.shape:
            raise ConfigurationError(
                f"block {i} logits shape {tuple(pl_logits.shape)} does not match "
                f"output {tuple(logits.shape)}")
        p = F.softmax(pl_logits, dim=1)
        log_p = F.log_softmax(pl_logits, dim=1)
        per_sample = (_xlogx_pair(p, log_p) - p * log_pt).sum(dim=1)
        kd = kd + per_sample.mean()
    return ce, kd


def im_loss(logits: torch.Tensor) -> torch.Tensor:
    """Information maximization: batch-mean prediction entropy plus the
    (negative) entropy of the batch-mean prediction.

    Confident predictions pull the first term toward 0; a balanced class
    mix pulls the second toward -log K.  Range is [-log K, log K].
    """
    _check_logits(logits)
    p = F.softmax(logits, dim=1)
    log_p = F.log_softmax(logits, dim=1)
    entropy = -_xlogx_pair(p, log_p).sum(dim=1).mean()
    p_hat = p.mean(dim=0)
    diversity = _xlogx(p_hat).sum()
    return entropy + diversity


def total_loss(im, ce, kd, gac, weights: LossWeights):
    """Weighted mix: im + alpha * (ce + kd) + beta * gac.  Raises
    NumericError naming the first non-finite term."""
    terms = {"im": im, "ce": ce, "kd": kd, "gac": gac}
    for name, value in terms.items():
        detached = value.detach() if isinstance(value, torch.Tensor) else torch.tensor(float(value))
        if not torch.isfinite(detached).all():
            raise NumericError(f"loss term {name!r} is not finite")
    return im + weights.alpha * (ce + kd) + weights.beta * gac
