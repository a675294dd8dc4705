"""Differentiable simulation of the physical wireless link.

Real-valued latents are packed into complex baseband symbols, power
normalized to unit average power, and transmitted over an AWGN or Rayleigh
slow-fading channel. All operations are torch-based and differentiable with
respect to the transmitted signal (noise and fading realizations are treated
as constants), so the channel can sit inside a training loop.

Conventions:
  - A "signal" is a complex tensor whose last dimension holds the symbols;
    leading dimensions are treated as independent transmissions (one fading
    block / one noise-power measurement per leading index).
  - SNR is in dB. Noise variance per complex symbol is
    sigma^2 = P * 10^(-snr_db/10) with P measured from the input, so
    callers that skip power normalization still get the requested SNR.
  - Complex Gaussian CN(0, v) means independent real/imaginary parts with
    variance v/2 each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

POWER_EPS = 1e-12
GAIN_EPS = 1e-6


class DegenerateSignalError(ValueError):
    """Latent had (near-)zero power; usually an untrained or collapsed encoder."""


class DeepFadeError(RuntimeError):
    """Channel gain magnitude below the equalization threshold."""


def _sym_power(z: torch.Tensor) -> torch.Tensor:
    """|z|^2 summed over real/imag parts; smooth at 0, unlike abs()."""
    if z.is_complex():
        return z.real.square() + z.imag.square()
    return z.square()


def to_complex(v: torch.Tensor) -> torch.Tensor:
    """Pack a real vector of length 2k into k complex symbols.

    Adjacent pairs become (real, imag): symbol j = v[2j] + i*v[2j+1].
    Works on batched input; pairing happens along the last dimension.
    """
    n = v.shape[-1]
    if n < 2 or n % 2 != 0:
        raise ValueError(f"real vector length must be even and >= 2, got {n}")
    return torch.complex(v[..., 0::2], v[..., 1::2])


def from_complex(z: torch.Tensor) -> torch.Tensor:
    """Exact inverse of to_complex: interleave real and imaginary parts."""
    return torch.stack((z.real, z.imag), dim=-1).flatten(start_dim=-2)


def power_normalize(v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pack a real latent into complex symbols with unit average power.

    Returns (signal, scale) where signal = to_complex(v) / scale and
    scale = sqrt(mean |to_complex(v)|^2), computed per leading index.
    Differentiable in v. Raises DegenerateSignalError when the measured
    mean power falls below POWER_EPS.
    """
    z = to_complex(v)
    p = _sym_power(z).mean(dim=-1)
    if torch.any(p.detach() < POWER_EPS):
        raise DegenerateSignalError(
            f"mean symbol power {float(p.detach().min()):.3e} below {POWER_EPS:.0e}"
        )
    scale = torch.sqrt(p)
    return z / scale.unsqueeze(-1), scale


@dataclass
class ChannelConfig:
    """Channel kind plus operating point.

    snr_db may be +inf (transparent-channel hook: zero noise); NaN and -inf
    are rejected. h_c is the Rayleigh gain variance E[|h|^2].
    """

    kind: str = "awgn"
    snr_db: float = 10.0
    h_c: float = 1.0
    equalize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("awgn", "rayleigh"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not self.h_c > 0:
            raise ValueError(f"h_c must be > 0, got {self.h_c}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be a real value or +inf, got {self.snr_db}")


@dataclass
class ChannelOutcome:
    """One transmission: received symbols, the gain applied, and sigma^2.

    gain is 1+0i for AWGN; for Rayleigh it is one complex scalar per leading
    index of the signal (slow fading, constant over each block).
    noise_variance is per complex symbol, same leading shape as gain.
    """

    received: torch.Tensor
    gain: torch.Tensor
    noise_variance: torch.Tensor


def noise_variance_for(power: torch.Tensor, snr_db: float) -> torch.Tensor:
    """sigma^2 = P * 10^(-snr_db/10). Pure; exact in double precision."""
    return power * 10.0 ** (-snr_db / 10.0)


def _sample_cn(shape, variance, generator, dtype, device) -> torch.Tensor:
    """Circularly symmetric complex Gaussian with per-symbol variance."""
    real_dtype = torch.empty(0, dtype=dtype).real.dtype if dtype.is_complex else dtype
    half = torch.sqrt(variance.to(real_dtype) / 2.0)
    re = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    im = torch.randn(shape, generator=generator, dtype=real_dtype, device=device)
    return torch.complex(re * half, im * half)


def draw_rayleigh_gain(
    h_c: float,
    generator: torch.Generator,
    n: int = 1,
    dtype: torch.dtype = torch.complex64,
) -> torch.Tensor:
    """Draw n complex gains h ~ CN(0, h_c). Used by rayleigh_transmit per block."""
    if not h_c > 0:
        raise ValueError(f"h_c must be > 0, got {h_c}")
    var = torch.full((n,), float(h_c), dtype=torch.float64)
    return _sample_cn((n,), var, generator, dtype, "cpu")


def awgn_transmit(
    z: torch.Tensor,
    snr_db: float,
    generator: torch.Generator,
    forced_noise: torch.Tensor | None = None,
) -> ChannelOutcome:
    """received = z + n with n ~ CN(0, sigma^2 I), sigma^2 from measured power.

    The noise realization is a constant sample: the gradient of the output
    with respect to z is the identity. forced_noise is a test hook that
    bypasses sampling entirely.
    """
    p = _sym_power(z.detach()).mean(dim=-1)
    sigma2 = noise_variance_for(p, snr_db)
    if forced_noise is not None:
        n = forced_noise
    elif float(sigma2.max()) == 0.0:
        n = torch.zeros_like(z)
    else:
        n = _sample_cn(z.shape, sigma2.unsqueeze(-1).expand_as(z.real), generator, z.dtype, z.device)
    gain = torch.ones(p.shape, dtype=z.dtype, device=z.device)
    return ChannelOutcome(received=z + n, gain=gain, noise_variance=sigma2)


def rayleigh_transmit(
    z: torch.Tensor,
    snr_db: float,
    h_c: float,
    generator: torch.Generator,
    forced_gain: torch.Tensor | complex | None = None,
    forced_noise: torch.Tensor | None = None,
) -> ChannelOutcome:
    """received = h*z + n, one gain h ~ CN(0, h_c) per block.

    sigma^2 is computed from the transmit power of z (pre-fade), as for
    AWGN. Gains and noise are constants w.r.t. autograd.
    """
    if not h_c > 0:
        raise ValueError(f"h_c must be > 0, got {h_c}")
    p = _sym_power(z.detach()).mean(dim=-1)
    sigma2 = noise_variance_for(p, snr_db)
    if forced_gain is not None:
        h = torch.as_tensor(forced_gain, dtype=z.dtype, device=z.device).expand(p.shape).clone()
    else:
        h = draw_rayleigh_gain(h_c, generator, n=max(1, p.numel()), dtype=z.dtype)
        h = h.reshape(p.shape).to(z.device)
    if forced_noise is not None:
        n = forced_noise
    elif float(sigma2.max()) == 0.0:
        n = torch.zeros_like(z)
    else:
        n = _sample_cn(z.shape, sigma2.unsqueeze(-1).expand_as(z.real), generator, z.dtype, z.device)
    return ChannelOutcome(received=h.unsqueeze(-1) * z + n, gain=h, noise_variance=sigma2)


def equalize(outcome: ChannelOutcome) -> torch.Tensor:
    """Perfect-CSI equalization: received / gain. Identity for AWGN.

    Raises DeepFadeError when any |gain| <= GAIN_EPS instead of amplifying
    noise without bound; the caller decides whether to fall back to the raw
    received signal.
    """
    mag = outcome.gain.detach().abs()
    if torch.any(mag <= GAIN_EPS):
        raise DeepFadeError(f"|gain| = {float(mag.min()):.3e} <= {GAIN_EPS:.0e}")
    return outcome.received / outcome.gain.unsqueeze(-1)


def measure_snr(clean: torch.Tensor, noisy: torch.Tensor) -> float:
    """10*log10(mean|clean|^2 / mean|noisy - clean|^2), in dB.

    Measured in double precision over all elements. Returns +inf when the
    residual power is exactly zero.
    """
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(noisy.shape)}")
    c = clean.detach().to(torch.complex128)
    y = noisy.detach().to(torch.complex128)
    sig = float(_sym_power(c).mean())
    err = float(_sym_power(y - c).mean())
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / err)


def _mix_seed(seed: int, counter: int) -> int:
    """splitmix64-style mix of (seed, call counter) into one 63-bit seed."""
    x = (seed * 0x9E3779B97F4A7C15 + counter * 0xBF58476D1CE4E5B9 + 0x94D049BB133111EB) % (1 << 64)
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) % (1 << 64)
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) % (1 << 64)
    x ^= x >> 31
    return x % (1 << 63)


class Channel:
    """A configured link with its own counter-seeded RNG stream.

    Every call derives a fresh generator from (config.seed, call index), so
    transmissions are reproducible regardless of what other code does with
    global RNG state. Instances are immutable apart from the call counter;
    use one instance per worker for concurrent evaluation.
    """

    def __init__(self, config: ChannelConfig):
        self.config = config
        self.calls = 0

    def transmit(self, z: torch.Tensor, snr_db: float | None = None) -> ChannelOutcome:
        """Transmit one signal; snr_db overrides the configured operating point."""
        snr = self.config.snr_db if snr_db is None else snr_db
        gen = torch.Generator()
        gen.manual_seed(_mix_seed(self.config.seed, self.calls))
        self.calls += 1
        if self.config.kind == "awgn":
            return awgn_transmit(z, snr, gen)
        return rayleigh_transmit(z, snr, self.config.h_c, gen)
