"""Attention extraction: channel-wise gating and spatial saliency per block.

Each backbone block owns one :class:`AttentionModule` that decomposes its
semantic feature map into a channel attention vector (squeeze-excite shape)
and a spatial saliency distribution (encoder-decoder shape).  The spatial
map modulates the feature stream; the channel vector is kept for
distillation against the classifier output.
"""

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

POOL_FACTOR = 2


def default_reduction(channels: int) -> int:
    """Reduction ratio used when none is given: 16 for wide blocks, else 4."""
    return 16 if channels >= 64 else 4


def validate_feature_map(f: torch.Tensor, channels: int | None = None,
                         require_pool_divisible: bool = False) -> None:
    """Check the (B, C, H, W) feature-map contract.

    Raises ConfigurationError on shape problems and NumericError on
    non-finite entries.
    """
    if f.dim() != 4:
        raise ConfigurationError(
            f"feature map must be 4-D (B, C, H, W), got shape {tuple(f.shape)}")
    b, c, h, w = f.shape
    if b < 1 or c < 1:
        raise ConfigurationError(f"batch and channel counts must be >= 1, got {b}, {c}")
    if h < 4 or w < 4:
        raise ConfigurationError(f"spatial extent must be >= 4, got {h}x{w}")
    if channels is not None and c != channels:
        raise ConfigurationError(
            f"feature map has {c} channels but module was built for {channels}")
    if require_pool_divisible and (h % POOL_FACTOR or w % POOL_FACTOR):
        raise ConfigurationError(
            f"spatial extent {h}x{w} not divisible by pool factor {POOL_FACTOR}; "
            "unpooling could not restore it")
    if not torch.isfinite(f).all():
        raise NumericError("feature map contains non-finite entries")


class ChannelAttention(nn.Module):
    """Squeeze-excite channel gate.

    Pipeline: AvgPool2d -> reshape -> Linear/ReLU -> Linear/Sigmoid ->
    reshape -> multiply.  The sigmoid vector is returned alongside the
    rescaled features so it can feed the distillation head.

    Args:
        channels: input channel count C.
        reduction: squeeze ratio r; must divide C.
    """

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        reduction = default_reduction(channels) if reduction is None else reduction
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"reduction {reduction} must be a positive divisor of channels {channels}")
        self.channels = channels
        self.reduction = reduction
        self.squeeze = nn.Linear(channels, channels // reduction)
        self.excite = nn.Linear(channels // reduction, channels)

    def forward(self, f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (rescaled features, gate vector of shape (B, C))."""
        validate_feature_map(f, self.channels)
        pooled = f.mean(dim=(2, 3))
        gate = torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))
        scaled = f * gate[:, :, None, None]
        return scaled, gate


class SpatialAttention(nn.Module):
    """Encoder-decoder spatial saliency map.

    Six stages: Conv1x1 to C/r; Conv3x3 to 2C/r with BN/ReLU/MaxPool;
    Conv3x3 to 4C/r with BN/ReLU; Deconv3x3 to 2C/r with BN/ReLU/MaxUnpool;
    Deconv3x3 to C/r with BN/ReLU; Conv1x1 back to C followed by a softmax
    over the flattened spatial extent of each channel.  Pool indices are
    recorded so unpooling restores the exact extent.
    """

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        reduction = default_reduction(channels) if reduction is None else reduction
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"reduction {reduction} must be a positive divisor of channels {channels}")
        self.channels = channels
        self.reduction = reduction
        cr = channels // reduction
        self.enc1 = nn.Conv2d(channels, cr, kernel_size=1)
        self.enc2 = nn.Conv2d(cr, 2 * cr, kernel_size=3, padding=1)
        self.bn2 = nn.BatchNorm2d(2 * cr)
        self.pool = nn.MaxPool2d(POOL_FACTOR, return_indices=True)
        self.enc3 = nn.Conv2d(2 * cr, 4 * cr, kernel_size=3, padding=1)
        self.bn3 = nn.BatchNorm2d(4 * cr)
        self.dec4 = nn.ConvTranspose2d(4 * cr, 2 * cr, kernel_size=3, padding=1)
        self.bn4 = nn.BatchNorm2d(2 * cr)
        self.unpool = nn.MaxUnpool2d(POOL_FACTOR)
        self.dec5 = nn.ConvTranspose2d(2 * cr, cr, kernel_size=3, padding=1)
        self.bn5 = nn.BatchNorm2d(cr)
        self.out6 = nn.Conv2d(cr, channels, kernel_size=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        validate_feature_map(f, self.channels, require_pool_divisible=True)
        b, c, h, w = f.shape
        x = self.enc1(f)
        x = F.relu(self.bn2(self.enc2(x)))
        x, idx = self.pool(x)
        x = F.relu(self.bn3(self.enc3(x)))
        x = F.relu(self.bn4(self.dec4(x)))
        x = self.unpool(x, idx, output_size=(h, w))
        x = F.relu(self.bn5(self.dec5(x)))
        x = self.out6(x)
        return F.softmax(x.reshape(b, c, h * w), dim=2).reshape(b, c, h, w)


class AttentionOutput(NamedTuple):
    modulated: torch.Tensor     # spatially and channel-gated features, shape of input
    channel_attn: torch.Tensor  # sigmoid gate, shape (B, C)


class AttentionModule(nn.Module):
    """One block's attention extractor.

    Both decomposed attentions modulate the semantic feature: the spatial
    saliency map and the broadcast channel gate multiply the input
    elementwise.  The raw channel gate is returned for the distillation
    path.
    """

    def __init__(self, channels: int, reduction: int | None = None):
        super().__init__()
        self.channels = channels
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(channels, reduction)

    def forward(self, f: torch.Tensor) -> AttentionOutput:
        saliency = self.spatial(f)
        _, gate = self.channel(f)
        return AttentionOutput(saliency * f * gate[:, :, None, None], gate)
