"""Class centroids, smoothing across epochs, and pseudo-label assignment.

Once per adaptation epoch the full target set is embedded, per-class
centroids are taken as softmax-probability-weighted means, smoothed
against the previous epoch's table, and every sample is labeled by
cosine-nearest centroid.  One refinement round then recomputes centroids
from the hard labels and reassigns.
"""

import csv
import os
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

# A class whose total softmax weight falls below this is treated as
# unobserved: its centroid row is flagged invalid and skipped at
# assignment time.
EMPTY_WEIGHT = 1e-12
_NORM_FLOOR = 1e-12


@dataclass
class CentroidTable:
    """K class centroids plus the smoothing state carried across epochs."""

    centroids: torch.Tensor            # (K, d)
    valid: torch.Tensor                # (K,) bool, False = empty class
    smoothing: float = 0.1             # blend weight on the previous table
    previous: torch.Tensor | None = None

    def __post_init__(self):
        if self.centroids.dim() != 2:
            raise ConfigurationError("centroids must be a (K, d) array")
        if self.valid.shape != (self.centroids.shape[0],):
            raise ConfigurationError("valid flags must have one entry per class")
        if not 0 <= self.smoothing <= 1:
            raise ConfigurationError(
                f"smoothing must be in [0, 1], got {self.smoothing}")
        if not torch.isfinite(self.centroids[self.valid]).all():
            raise NumericError("non-finite centroid row")

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]


@dataclass
class PseudoLabels:
    """Hard labels plus cosine similarity to the assigned centroid."""

    labels: torch.Tensor      # (n,) long
    confidence: torch.Tensor  # (n,) in [-1, 1]

    def __post_init__(self):
        if self.labels.shape != self.confidence.shape:
            raise ConfigurationError("labels and confidence lengths differ")


def _check_embeddings(z: torch.Tensor) -> None:
    if z.dim() != 2 or z.shape[0] < 1:
        raise ConfigurationError("embeddings must be a non-empty (n, d) array")
    if not torch.isfinite(z).all():
        raise NumericError("non-finite embedding")


def compute_centroids(z: torch.Tensor, logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted class means.

    Returns (centroids, valid): centroids[k] = sum_i softmax(logits_i)[k] * z_i
    normalized by the total weight of class k; classes with total weight
    under EMPTY_WEIGHT get a zero row and valid[k] = False.
    """
    _check_embeddings(z)
    if logits.dim() != 2 or logits.shape[0] != z.shape[0]:
        raise ConfigurationError(
            f"logits shape {tuple(logits.shape)} does not pair with "
            f"{z.shape[0]} embeddings")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    weights = F.softmax(logits, dim=1)              # (n, K)
    support = weights.sum(dim=0)                    # (K,)
    valid = support > EMPTY_WEIGHT
    sums = weights.t() @ z                          # (K, d)
    denom = torch.where(valid, support, torch.ones_like(support))
    centroids = sums / denom[:, None]
    centroids = torch.where(valid[:, None], centroids, torch.zeros_like(centroids))
    return centroids, valid


def ems_update(table: CentroidTable | None, fresh: torch.Tensor,
               valid: torch.Tensor | None = None,
               smoothing: float = 0.1) -> CentroidTable:
    """Blend fresh centroids into the running table.

    new = smoothing * old + (1 - smoothing) * fresh per class.  With no
    previous table the fresh centroids pass through unchanged.  A class
    that is empty on one side keeps the other side's centroid.
    """
    if fresh.dim() != 2:
        raise ConfigurationError("fresh centroids must be a (K, d) array")
    if valid is None:
        valid = torch.ones(fresh.shape[0], dtype=torch.bool)
    if table is None:
        return CentroidTable(fresh.clone(), valid.clone(), smoothing, previous=None)
    lam = table.smoothing
    if fresh.shape != table.centroids.shape:
        raise ConfigurationError(
            f"fresh shape {tuple(fresh.shape)} does not match table "
            f"{tuple(table.centroids.shape)}")
    old = table.centroids
    blended = lam * old + (1.0 - lam) * fresh
    both = table.valid & valid
    merged = torch.where(both[:, None], blended,
                         torch.where(table.valid[:, None], old, fresh))
    return CentroidTable(merged, table.valid | valid, lam, previous=old.clone())


def _cosine_similarity(z: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    zn = z.norm(dim=1, keepdim=True).clamp_min(_NORM_FLOOR)
    cn = centroids.norm(dim=1, keepdim=True).clamp_min(_NORM_FLOOR)
    return (z / zn) @ (centroids / cn).t()


def assign_labels(z: torch.Tensor, table: CentroidTable) -> PseudoLabels:
    """Cosine-nearest-centroid labels; distance 1 - cos, ties go to the
    smallest class index, empty classes never win."""
    _check_embeddings(z)
    if not table.valid.any():
        raise ConfigurationError("cannot assign labels: every centroid is empty")
    sim = _cosine_similarity(z, table.centroids)           # (n, K)
    dist = 1.0 - sim
    dist = torch.where(table.valid[None, :], dist,
                       torch.full_like(dist, float("inf")))
    labels = dist.argmin(dim=1)                            # first min wins
    confidence = sim.gather(1, labels[:, None]).squeeze(1)
    return PseudoLabels(labels, confidence)


def refine_labels(z: torch.Tensor, labels: PseudoLabels, num_classes: int,
                  fallback: CentroidTable | None = None) -> PseudoLabels:
    """One hard-assignment refinement round.

    Recomputes each class centroid as the plain mean of the samples
    currently labeled with it, then reassigns everything once.  A class
    with no samples keeps its centroid from `fallback` when one is given,
    otherwise it is excluded from the reassignment.
    """
    _check_embeddings(z)
    lab = labels.labels
    if lab.shape[0] != z.shape[0]:
        raise ConfigurationError("labels length does not match embeddings")
    if lab.numel() and (lab.min() < 0 or lab.max() >= num_classes):
        raise ConfigurationError("label out of range")
    one_hot = F.one_hot(lab, num_classes).to(z.dtype)      # (n, K)
    counts = one_hot.sum(dim=0)
    occupied = counts > 0
    denom = torch.where(occupied, counts, torch.ones_like(counts))
    hard = (one_hot.t() @ z) / denom[:, None]
    valid = occupied.clone()
    if fallback is not None:
        if fallback.num_classes != num_classes:
            raise ConfigurationError("fallback table has the wrong class count")
        use_prior = ~occupied & fallback.valid
        hard = torch.where(use_prior[:, None], fallback.centroids.to(z.dtype), hard)
        valid = occupied | use_prior
    return assign_labels(z, CentroidTable(hard, valid))


def pseudo_label_epoch(z: torch.Tensor, logits: torch.Tensor,
                       table: CentroidTable | None,
                       smoothing: float = 0.1) -> tuple[PseudoLabels, CentroidTable]:
    """Full per-epoch labeling pass: fresh centroids, smoothing, initial
    assignment, one refinement.  Returns the refined labels and the
    updated table to carry into the next epoch."""
    fresh, valid = compute_centroids(z, logits)
    table = ems_update(table, fresh, valid, smoothing)
    initial = assign_labels(z, table)
    refined = refine_labels(z, initial, logits.shape[1], fallback=table)
    return refined, table


def write_label_debug(path, epoch: int, pseudo: PseudoLabels, num_classes: int) -> None:
    """Append one row per class: epoch, class, count, mean confidence."""
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "class", "count", "mean_confidence"])
        for k in range(num_classes):
            mask = pseudo.labels == k
            count = int(mask.sum())
            mean_conf = float(pseudo.confidence[mask].mean()) if count else 0.0
            writer.writerow([epoch, k, count, repr(mean_conf)])
