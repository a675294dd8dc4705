"""Image quality metrics: PSNR, SSIM, and an optional perceptual distance.

All metrics operate on float pixels in [0, 1] (peak = 1). In dB terms this
matches the 255-peak convention exactly, since scaling both images scales
peak^2 and MSE by the same factor.

The perceptual distance follows the usual deep-feature recipe: both images
pass through a small convolutional backbone, features are unit-normalized
across channels at each tap, and squared differences are averaged spatially
and across layers. The backbone weights live in an external named-tensor
archive (.npz with a JSON shape manifest) so the core package carries no
pretrained assets; without a weight file the metric reports unavailable
rather than inventing a number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricUnavailableError(RuntimeError):
    """The metric cannot be computed (e.g. missing backbone weights)."""


@dataclass
class MetricRecord:
    psnr_db: float
    ssim: float
    lpips: float | None
    region: str  # "full" | "masked"


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE); +inf when the images are identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window means via direct sliding-window products."""
    win = np.lib.stride_tricks.sliding_window_view(x, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5).

    Channels are scored independently and averaged. Symmetric in (a, b);
    1.0 iff the images are identical. Images smaller than the window are
    rejected.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than SSIM window {SSIM_WINDOW}")
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _windowed(x, kernel)
        mu_y = _windowed(y, kernel)
        var_x = _windowed(x * x, kernel) - mu_x**2
        var_y = _windowed(y * y, kernel) - mu_y**2
        cov = _windowed(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Perceptual distance.
# ---------------------------------------------------------------------------

# Fixed backbone layout: (out_channels, in_channels, stride) per conv tap.
BACKBONE_LAYERS = ((16, 3, 1), (32, 16, 2), (64, 32, 2))
BACKBONE_KERNEL = 3


def backbone_tensor_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, (out_ch, in_ch, _) in enumerate(BACKBONE_LAYERS, start=1):
        shapes[f"conv{i}.weight"] = (out_ch, in_ch, BACKBONE_KERNEL, BACKBONE_KERNEL)
        shapes[f"conv{i}.bias"] = (out_ch,)
    return shapes


def save_backbone(path, seed: int = 0) -> None:
    """Write a randomly initialized backbone weight archive (He-scaled)."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in backbone_tensor_shapes().items():
        if name.endswith("weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arrays[name] = rng.normal(0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    manifest = json.dumps({k: list(v.shape) for k, v in arrays.items()})
    np.savez(path, __manifest__=np.frombuffer(manifest.encode(), dtype=np.uint8), **arrays)


def load_backbone(path) -> dict[str, torch.Tensor]:
    """Load and validate a backbone weight archive."""
    try:
        with np.load(path) as archive:
            raw = {k: archive[k] for k in archive.files}
    except Exception as exc:  # noqa: BLE001
        raise MetricUnavailableError(f"cannot read backbone weights {path}: {exc}") from exc
    if "__manifest__" not in raw:
        raise MetricUnavailableError(f"backbone archive {path} missing shape manifest")
    manifest = json.loads(bytes(raw.pop("__manifest__")).decode())
    expected = backbone_tensor_shapes()
    for name, shape in expected.items():
        if name not in raw:
            raise MetricUnavailableError(f"backbone archive missing tensor {name}")
        if tuple(raw[name].shape) != shape or manifest.get(name) != list(shape):
            raise MetricUnavailableError(
                f"backbone tensor {name} has shape {raw[name].shape}, expected {shape}"
            )
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in raw.items()}


def _backbone_features(x: torch.Tensor, weights: dict[str, torch.Tensor]) -> list[torch.Tensor]:
    feats = []
    out = x
    for i, (_, _, stride) in enumerate(BACKBONE_LAYERS, start=1):
        out = F.conv2d(out, weights[f"conv{i}.weight"], weights[f"conv{i}.bias"],
                       stride=stride, padding=BACKBONE_KERNEL // 2)
        out = F.relu(out)
        feats.append(out)
    return feats


def lpips(a: np.ndarray, b: np.ndarray, backbone: dict[str, torch.Tensor]) -> float:
    """Normalized deep-feature distance; 0 iff identical inputs, always >= 0."""
    a, b = _check_pair(a, b)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) images, got {a.shape}")
    with torch.no_grad():
        x = torch.from_numpy(np.stack([a, b]).transpose(0, 3, 1, 2)).float() * 2.0 - 1.0
        dist = 0.0
        for feat in _backbone_features(x, backbone):
            norm = feat / torch.sqrt(feat.square().sum(dim=1, keepdim=True) + 1e-10)
            dist += float((norm[0] - norm[1]).square().sum(dim=0).mean())
    return dist


def masked_metrics(
    a: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray,
    backbone: dict[str, torch.Tensor] | None = None,
) -> MetricRecord:
    """PSNR/SSIM over the mask bounding box with off-mask pixels zeroed.

    The box is grown to the SSIM window size when the region is tiny (and
    the image allows it). An empty mask is a domain error.
    """
    a, b = _check_pair(a, b)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != a.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match images {a.shape[:2]}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    r0, r1 = _grow_span(rows[0], rows[-1] + 1, SSIM_WINDOW, a.shape[0])
    c0, c1 = _grow_span(cols[0], cols[-1] + 1, SSIM_WINDOW, a.shape[1])
    mc = m[r0:r1, c0:c1, None]
    ac = a[r0:r1, c0:c1] * mc
    bc = b[r0:r1, c0:c1] * mc
    return MetricRecord(
        psnr_db=psnr(ac, bc),
        ssim=ssim(ac, bc),
        lpips=lpips(ac, bc, backbone) if backbone is not None else None,
        region="masked",
    )


def full_metrics(
    a: np.ndarray, b: np.ndarray, backbone: dict[str, torch.Tensor] | None = None
) -> MetricRecord:
    return MetricRecord(
        psnr_db=psnr(a, b),
        ssim=ssim(a, b),
        lpips=lpips(a, b, backbone) if backbone is not None else None,
        region="full",
    )


def _grow_span(lo: int, hi: int, minimum: int, limit: int) -> tuple[int, int]:
    length = hi - lo
    if length >= minimum or limit < minimum:
        return int(lo), int(hi)
    extra = minimum - length
    lo = max(0, lo - extra // 2)
    hi = min(limit, lo + minimum)
    lo = max(0, hi - minimum)
    return int(lo), int(hi)
