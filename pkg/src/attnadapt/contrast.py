"""Global-and-local contrastive alignment.

Every target image is forwarded twice: once as-is (the global view) and
once through a deterministic center-crop-and-resize (the local view).
The local embedding is the anchor, the matching global embedding is the
positive, and the global embeddings of every *other* dataset item, read
from a memory bank, are the negatives.  The bank stores one global
embedding per dataset index and is refreshed in place as batches come
through.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolationError, NumericError


@dataclass(frozen=True)
class GacConfig:
    temperature: float = 0.07
    crop_fraction: float = 0.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigurationError(
                f"crop_fraction must be in (0, 1], got {self.crop_fraction}")


def make_views(batch: torch.Tensor, crop_fraction: float = 0.5) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (global, local) views of an image batch.

    The local view is a center crop of side round(fraction * min(H, W)),
    resized back to (H, W) bilinearly.  Deterministic: no randomness, so
    repeated calls agree bit for bit.
    """
    if batch.dim() != 4:
        raise ConfigurationError(f"expected a 4-d image batch, got {batch.dim()}-d")
    if not 0 < crop_fraction <= 1:
        raise ConfigurationError(f"crop_fraction must be in (0, 1], got {crop_fraction}")
    h, w = batch.shape[2], batch.shape[3]
    side = int(round(crop_fraction * min(h, w)))
    if side < 1:
        raise ConfigurationError(
            f"crop side {side} from fraction {crop_fraction} on {h}x{w} is too small")
    top = (h - side) // 2
    left = (w - side) // 2
    crop = batch[:, :, top:top + side, left:left + side]
    if side == h and side == w:
        local = batch.clone()
    else:
        local = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    return batch, local


class MemoryBank:
    """Fixed-size store of one global embedding per dataset index.

    Slots begin uninitialized; a full no-grad pass over the dataset fills
    them before the first loss evaluation.  update() overwrites rows and
    counts writes per slot.
    """

    def __init__(self, size: int, dim: int, dtype: torch.dtype = torch.float32):
        if size < 2:
            raise ConfigurationError(f"bank needs at least 2 slots, got {size}")
        if dim < 1:
            raise ConfigurationError(f"embedding dim must be >= 1, got {dim}")
        self.embeddings = torch.zeros(size, dim, dtype=dtype)
        self.initialized = torch.zeros(size, dtype=torch.bool)
        self.write_counts = torch.zeros(size, dtype=torch.long)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def update(self, indices: torch.Tensor, embeddings: torch.Tensor) -> None:
        if indices.dim() != 1 or embeddings.dim() != 2:
            raise ConfigurationError("update expects 1-d indices and 2-d embeddings")
        if indices.shape[0] != embeddings.shape[0]:
            raise ConfigurationError(
                f"{indices.shape[0]} indices but {embeddings.shape[0]} embeddings")
        if embeddings.shape[1] != self.dim:
            raise ConfigurationError(
                f"bank dim is {self.dim}, got embeddings of dim {embeddings.shape[1]}")
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.size):
            raise ConfigurationError("bank index out of range")
        if len(set(indices.tolist())) != indices.numel():
            raise ConfigurationError("duplicate indices in one bank update")
        if not torch.isfinite(embeddings).all():
            raise NumericError("non-finite embedding written to bank")
        self.embeddings[indices] = embeddings.detach().to(self.embeddings.dtype)
        self.initialized[indices] = True
        self.write_counts[indices] += 1

    def state(self) -> dict:
        return {
            "embeddings": self.embeddings.clone(),
            "initialized": self.initialized.clone(),
            "write_counts": self.write_counts.clone(),
        }

    def load_state(self, state: dict) -> None:
        emb = state["embeddings"]
        if emb.shape != self.embeddings.shape:
            raise ConfigurationError(
                f"bank state shape {tuple(emb.shape)} does not match "
                f"{tuple(self.embeddings.shape)}")
        self.embeddings = emb.clone()
        self.initialized = state["initialized"].clone()
        self.write_counts = state["write_counts"].clone()


def gac_loss(local_z: torch.Tensor, global_z: torch.Tensor,
             indices: torch.Tensor, bank: MemoryBank,
             temperature: float = 0.07) -> torch.Tensor:
    """Contrast fresh local embeddings against the bank.

    For anchor i the score of candidate v is exp(local_i . v / T).  The
    numerator uses the fresh global embedding of the same image; the
    denominator sums the *stored* bank embeddings of every other dataset
    index.  The positive is not part of the denominator, so the ratio can
    exceed 1 and the per-anchor term can be negative.

    Computed via log-sum-exp with max subtraction for stability.
    """
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    if local_z.dim() != 2 or global_z.dim() != 2:
        raise ConfigurationError("embeddings must be 2-d (batch, dim)")
    if local_z.shape != global_z.shape:
        raise ConfigurationError(
            f"local and global shapes differ: {tuple(local_z.shape)} vs "
            f"{tuple(global_z.shape)}")
    if indices.dim() != 1 or indices.shape[0] != local_z.shape[0]:
        raise ConfigurationError("indices must be 1-d and match the batch size")
    if local_z.shape[1] != bank.dim:
        raise ConfigurationError(
            f"bank dim {bank.dim} does not match embeddings of dim {local_z.shape[1]}")
    if indices.numel() and (indices.min() < 0 or indices.max() >= bank.size):
        raise ConfigurationError("bank index out of range")
    if not (torch.isfinite(local_z).all() and torch.isfinite(global_z).all()):
        raise NumericError("non-finite embedding passed to contrastive loss")

    batch = local_z.shape[0]
    # Every slot that appears in some anchor's denominator must be filled.
    needed = ~torch.eye(bank.size, dtype=torch.bool)[indices]  # (B, size)
    if not bank.initialized[needed.any(dim=0)].all():
        raise ContractViolationError(
            "contrastive loss before the memory bank was fully initialized")

    sims = local_z @ bank.embeddings.to(local_z.dtype).t() / temperature  # (B, size)
    pos = (local_z * global_z).sum(dim=1) / temperature                   # (B,)
    neg_inf = torch.tensor(float("-inf"), dtype=sims.dtype)
    masked = torch.where(needed, sims, neg_inf)
    row_max = masked.max(dim=1).values
    log_denom = row_max + torch.log(
        torch.exp(masked - row_max[:, None]).sum(dim=1))
    return (log_denom - pos).sum() / batch
