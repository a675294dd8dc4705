"""Mask-guided attention: enhance target-region features under an explicit mask.

A small convolutional query encoder lifts the binary region mask to the
feature channel count. The query and an encoded key are concatenated and fed
to a dynamic kernel weight generator (DKWG) that emits one depthwise r x r
kernel per spatial position, softmax-normalized over the taps. Dynamically
convolving the key with those kernels yields the dynamic features d; a
per-channel sigmoid gate g from channel attention over (d, static features)
fuses the two paths:

    out = g * d + (1 - g) * static

The gate bias starts strongly negative so a freshly inserted block is the
identity on the static path, which lets a model trained without the block
keep its behavior when the block is added and fine-tuned.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def downsample_mask(mask: torch.Tensor, target_hw: tuple[int, int], soft: bool = False) -> torch.Tensor:
    """Pool a (N,1,H,W) mask down to (N,1,h,w) by area averaging.

    Hard mode (default) thresholds the pooled coverage at 0.5; soft mode
    keeps fractional coverage in [0,1]. Upsampling requests are rejected.
    """
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"expected (N,1,H,W) mask, got shape {tuple(mask.shape)}")
    h, w = target_hw
    if h > mask.shape[-2] or w > mask.shape[-1]:
        raise ValueError(
            f"cannot upsample mask {tuple(mask.shape[-2:])} to {(h, w)}"
        )
    pooled = F.adaptive_avg_pool2d(mask, (h, w))
    if soft:
        return pooled
    return (pooled >= 0.5).to(mask.dtype)


class QueryEncoder(nn.Module):
    """Encode the spatial context of the mask into a c-channel query map."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, channels, 3, padding=1)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() != 4 or mask.shape[1] != 1:
            raise ValueError(f"expected (N,1,h,w) mask, got shape {tuple(mask.shape)}")
        return self.conv2(self.act(self.conv1(mask)))


class DynamicKernelWeightGenerator(nn.Module):
    """concat(q, k) -> per-position depthwise kernel weights, softmaxed over taps.

    Output is (N, c*r^2, h, w), channel-major layout: entry ch*r^2 + tap.
    Each (position, channel) kernel is a probability distribution over the
    r^2 taps.
    """

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.act = nn.PReLU(channels)
        self.conv2 = nn.Conv2d(channels, channels * kernel_size**2, 1)

    def forward(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        if q.shape != k.shape:
            raise ValueError(f"query/key shape mismatch: {tuple(q.shape)} vs {tuple(k.shape)}")
        w = self.conv2(self.act(self.conv1(torch.cat([q, k], dim=1))))
        n, _, h, ww = w.shape
        r2 = self.kernel_size**2
        w = w.view(n, self.channels, r2, h, ww).softmax(dim=2)
        return w.reshape(n, self.channels * r2, h, ww)


def dynamic_conv(k: torch.Tensor, kernels: torch.Tensor, kernel_size: int = 3) -> torch.Tensor:
    """Apply per-position depthwise kernels to k with zero border padding.

    d[p, ch] = sum_tap kernels[p, ch, tap] * k[p + offset(tap), ch], taps in
    row-major window order. kernels is (N, c*r^2, h, w) as produced by the
    DKWG.
    """
    if k.dim() != 4:
        raise ValueError(f"expected (N,C,H,W) features, got shape {tuple(k.shape)}")
    n, c, h, w = k.shape
    r2 = kernel_size**2
    if kernels.shape != (n, c * r2, h, w):
        raise ValueError(
            f"kernel field shape {tuple(kernels.shape)} inconsistent with "
            f"features {tuple(k.shape)} and r={kernel_size}"
        )
    cols = F.unfold(k, kernel_size, padding=kernel_size // 2)
    cols = cols.view(n, c, r2, h, w)
    return (cols * kernels.view(n, c, r2, h, w)).sum(dim=2)


class ChannelAttention(nn.Module):
    """Global pooling over concat(d, k) -> bottleneck -> per-channel sigmoid gate."""

    def __init__(self, channels: int, reduction: int = 4, gate_bias: float = -10.0):
        super().__init__()
        hidden = max(2 * channels // reduction, 1)
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.act = nn.PReLU(hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.constant_(self.fc2.bias, gate_bias)

    def forward(self, d: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([d, k], dim=1).mean(dim=(2, 3))
        g = torch.sigmoid(self.fc2(self.act(self.fc1(pooled))))
        return g.unsqueeze(-1).unsqueeze(-1)


class MaskGuidedAttention(nn.Module):
    """Dual-path fusion of dynamic and static features under mask guidance.

    Shape-preserving: (N,C,h,w) in, (N,C,h,w) out. The mask must already be
    at feature resolution (see downsample_mask). gate_override is a test
    hook replacing the learned gate with a constant.
    """

    def __init__(self, channels: int, kernel_size: int = 3, gate_bias: float = -10.0):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.query_encoder = QueryEncoder(channels)
        self.key_encoder = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.PReLU(channels)
        )
        self.dkwg = DynamicKernelWeightGenerator(channels, kernel_size)
        self.channel_attention = ChannelAttention(channels, gate_bias=gate_bias)

    def forward(
        self,
        features: torch.Tensor,
        mask: torch.Tensor,
        gate_override: float | None = None,
    ) -> torch.Tensor:
        if features.dim() != 4 or features.shape[1] != self.channels:
            raise ValueError(
                f"expected (N,{self.channels},h,w) features, got {tuple(features.shape)}"
            )
        if mask.shape[-2:] != features.shape[-2:] or mask.shape[1] != 1:
            raise ValueError(
                f"mask {tuple(mask.shape)} not at feature resolution {tuple(features.shape)}"
            )
        q = self.query_encoder(mask)
        k_enc = self.key_encoder(features)
        kernels = self.dkwg(q, k_enc)
        d = dynamic_conv(k_enc, kernels, self.kernel_size)
        if gate_override is not None:
            g = torch.full((1, self.channels, 1, 1), gate_override, dtype=features.dtype)
        else:
            g = self.channel_attention(d, features)
        return g * d + (1.0 - g) * features
