"""Residual backbone with per-block attention and cross-layer fusion.

The network keeps two streams.  The semantic stream is an ordinary stack
of residual blocks.  The fusion stream accumulates attention-modulated
features: each block's spatially/channel-gated output is added to its
semantic feature, projected to the next block's shape, and averaged with
the next block's contribution.  Only the final fused map feeds the latent
projection and the linear classifier head.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aem import AttentionModule, validate_feature_map
from .errors import ConfigurationError, ContractViolationError


@dataclass(frozen=True)
class BlockSpec:
    """Architecture hyperparameters for the backbone.

    channels: per-block channel counts, non-decreasing.
    downsample: per-block spatial stride (1 keeps extent, 2 halves it).
    latent_dim: width d of the latent embedding z.
    num_classes: classifier output width K.
    reduction: optional per-block attention reduction ratios (None = auto).
    """

    channels: tuple[int, ...] = (16, 32, 64, 128)
    downsample: tuple[int, ...] = (1, 2, 2, 2)
    latent_dim: int = 128
    num_classes: int = 5
    reduction: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ConfigurationError("need at least 2 blocks")
        if len(self.downsample) != len(self.channels):
            raise ConfigurationError("downsample and channels lengths differ")
        if any(c2 < c1 for c1, c2 in zip(self.channels, self.channels[1:])):
            raise ConfigurationError("channel counts must be non-decreasing")
        if self.latent_dim < self.num_classes:
            raise ConfigurationError(
                f"latent_dim {self.latent_dim} must be >= num_classes {self.num_classes}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.reduction is not None and len(self.reduction) != len(self.channels):
            raise ConfigurationError("reduction and channels lengths differ")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)

    def block_extents(self, height: int, width: int) -> list[tuple[int, int]]:
        """Spatial extent after each block; raises if any block output is
        too small for its attention module (needs >= 4 and even)."""
        extents = []
        h, w = height, width
        for i, s in enumerate(self.downsample):
            if h % s or w % s:
                raise ConfigurationError(
                    f"extent {h}x{w} not divisible by stride {s} at block {i + 1}")
            h, w = h // s, w // s
            if h < 4 or w < 4 or h % 2 or w % 2:
                raise ConfigurationError(
                    f"block {i + 1} output extent {h}x{w} unsupported: attention "
                    "needs even extents of at least 4")
            extents.append((h, w))
        return extents

    def to_metadata(self) -> dict:
        return {
            "channels": list(self.channels),
            "downsample": list(self.downsample),
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "reduction": list(self.reduction) if self.reduction else None,
        }

    @staticmethod
    def from_metadata(meta: dict) -> "BlockSpec":
        return BlockSpec(
            channels=tuple(meta["channels"]),
            downsample=tuple(meta["downsample"]),
            latent_dim=int(meta["latent_dim"]),
            num_classes=int(meta["num_classes"]),
            reduction=tuple(meta["reduction"]) if meta.get("reduction") else None,
        )


class SemanticBlock(nn.Module):
    """Basic two-conv residual block with an optional strided shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + self.shortcut(x))


class ResidualProjection(nn.Module):
    """Cross-layer connector R: 1x1 convolution matching the next block's
    channel count and spatial extent."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, f_bar: torch.Tensor) -> torch.Tensor:
        return self.proj(f_bar)


def fuse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Average two aligned feature maps: 0.5 * (a + b)."""
    if a.shape != b.shape:
        raise ConfigurationError(
            f"fuse needs equal shapes, got {tuple(a.shape)} vs {tuple(b.shape)}")
    return 0.5 * (a + b)


@dataclass
class ForwardTrace:
    """Everything one forward pass produces."""

    z: torch.Tensor                    # (B, d), rows unit-norm unless zero
    logits: torch.Tensor               # (B, K)
    layer_logits: list[torch.Tensor]   # L x (B, K), projected channel gates
    fused: torch.Tensor                # final fused feature map
    saliency: list[torch.Tensor] = field(default_factory=list)  # L x (B, C_l, h, w)


def l2_normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Unit-normalize rows; all-zero rows pass through unchanged."""
    norm = x.norm(dim=1, keepdim=True)
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


class ClassifierHead(nn.Linear):
    """Linear classifier that can be frozen with byte-level auditing."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__(in_features, out_features)
        self._frozen_bytes: bytes | None = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen_bytes = self.parameter_bytes()

    @property
    def frozen(self) -> bool:
        return self._frozen_bytes is not None

    def parameter_bytes(self) -> bytes:
        return b"".join(
            p.detach().cpu().contiguous().numpy().tobytes() for p in self.parameters())

    def assert_unchanged(self) -> None:
        """Raise ContractViolationError if any frozen parameter byte drifted."""
        if self._frozen_bytes is None:
            return
        if self.parameter_bytes() != self._frozen_bytes:
            raise ContractViolationError("frozen classifier head was mutated")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.in_features:
            raise ConfigurationError(
                f"latent batch of width {z.shape[-1]} does not match head "
                f"input width {self.in_features}")
        return super().forward(z)


class AttentionFusionBackbone(nn.Module):
    """Stem + residual blocks, one attention module per block, progressive
    fusion, latent projection, and a linear classifier head.

    The fusion recurrence over blocks l = 1..L is

        fused_1 = attn_1 + sem_1
        fused_{l+1} = 0.5 * (R_l(fused_l) + (attn_{l+1} + sem_{l+1}))

    and z = normalize(Linear(GAP(fused_L))).
    """

    def __init__(self, spec: BlockSpec, in_channels: int = 3):
        super().__init__()
        self.spec = spec
        ch = spec.channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, ch[0], 3, padding=1),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(),
        )
        blocks, attns, projs, connectors = [], [], [], []
        prev = ch[0]
        for i, (c, s) in enumerate(zip(ch, spec.downsample)):
            blocks.append(SemanticBlock(prev if i else ch[0], c, s))
            r = spec.reduction[i] if spec.reduction else None
            attns.append(AttentionModule(c, r))
            projs.append(nn.Linear(c, spec.num_classes))
            prev = c
        for i in range(len(ch) - 1):
            connectors.append(ResidualProjection(ch[i], ch[i + 1], spec.downsample[i + 1]))
        self.blocks = nn.ModuleList(blocks)
        self.attention = nn.ModuleList(attns)
        self.layer_proj = nn.ModuleList(projs)
        self.connect = nn.ModuleList(connectors)
        self.latent = nn.Linear(ch[-1], spec.latent_dim)
        self.head = ClassifierHead(spec.latent_dim, spec.num_classes)

    def residual_connect(self, f_bar: torch.Tensor, from_block: int) -> torch.Tensor:
        """Project the fused map of block `from_block` (1-based) onto the
        next block's channel count and extent."""
        if not 1 <= from_block <= len(self.connect):
            raise ConfigurationError(
                f"from_block must be in [1, {len(self.connect)}], got {from_block}")
        expected = self.spec.channels[from_block - 1]
        if f_bar.shape[1] != expected:
            raise ConfigurationError(
                f"block {from_block} fused map should have {expected} channels, "
                f"got {f_bar.shape[1]}")
        return self.connect[from_block - 1](f_bar)

    def forward(self, x: torch.Tensor) -> ForwardTrace:
        validate_feature_map(x, channels=None)
        self.spec.block_extents(x.shape[2], x.shape[3])
        f = self.stem(x)
        fused = None
        layer_logits, saliency = [], []
        for i, (block, attn, proj) in enumerate(
                zip(self.blocks, self.attention, self.layer_proj)):
            f = block(f)
            sal = attn.spatial(f)
            _, gate = attn.channel(f)
            f_tilde = sal * f * gate[:, :, None, None]
            f_bar = f_tilde + f
            layer_logits.append(proj(gate))
            saliency.append(sal)
            if fused is None:
                fused = f_bar
            else:
                fused = fuse(self.residual_connect(fused, i), f_bar)
        z = l2_normalize_rows(self.latent(fused.mean(dim=(2, 3))))
        return ForwardTrace(z=z, logits=self.head(z), layer_logits=layer_logits,
                            fused=fused, saliency=saliency)

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(z)

    def backbone_parameters(self):
        """Trainable parameters outside the classifier head."""
        head_params = set(id(p) for p in self.head.parameters())
        return [p for p in self.parameters() if id(p) not in head_params]
