"""Channel state embedding: turn the link SNR into a noise-variance map.

The average power of a feature map and the fed-back SNR give a scalar noise
level sigma_n^2 = P_s / 10^(snr/10). That scalar is broadcast to a constant
single-channel map and concatenated onto the features, so every codec stage
sees the channel state alongside its activations. The map is recomputed
from each layer's own feature power (decoder layers therefore use received,
post-equalization power, which is all the receiver can observe).
"""

from __future__ import annotations

import torch


def signal_power(z: torch.Tensor) -> torch.Tensor:
    """Mean of squared entries over the whole feature map, P_s = (1/K) sum z_i^2."""
    if z.numel() == 0:
        raise ValueError("empty feature map")
    return z.square().mean()


def noise_level(p_s, snr_db: float):
    """sigma_n^2 = P_s / 10^(snr/10). Accepts floats or tensors.

    Monotone decreasing in snr_db, linear in p_s. Negative power is rejected.
    """
    neg = bool(p_s < 0) if not isinstance(p_s, torch.Tensor) else bool((p_s < 0).any())
    if neg:
        raise ValueError(f"signal power must be >= 0, got {p_s}")
    return p_s / 10.0 ** (snr_db / 10.0)


def embed_noise_map(
    z: torch.Tensor,
    snr_db: float,
    stop_gradient: bool = True,
    log_scale: bool = False,
) -> torch.Tensor:
    """Append a constant noise-level channel to a feature map.

    z is (C, H, W) or (N, C, H, W); the appended channel holds
    noise_level(signal_power(z), snr_db), computed per sample for batched
    input. The original channels pass through bit-exactly.

    stop_gradient detaches the power measurement so the map acts as channel
    state rather than a loss path into feature magnitudes. log_scale appends
    log1p(sigma_n^2) instead of the raw level.
    """
    if z.dim() not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {tuple(z.shape)}")
    src = z.detach() if stop_gradient else z
    batched = z.dim() == 4
    x = src if batched else src.unsqueeze(0)
    n, _, h, w = x.shape
    p = x.reshape(n, -1).square().mean(dim=1)
    level = noise_level(p, snr_db)
    if log_scale:
        level = torch.log1p(level)
    nmap = level.view(n, 1, 1, 1).expand(n, 1, h, w)
    out = torch.cat([z if batched else z.unsqueeze(0), nmap.to(z.dtype)], dim=1)
    return out if batched else out.squeeze(0)
