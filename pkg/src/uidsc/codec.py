"""Channel-aware semantic encoder/decoder with per-stage noise-map embedding.

The encoder is a stack of downsampling Conv-Norm-PReLU (CBP) blocks, each one
preceded by channel state embedding; mask-guided attention can be inserted
after configured blocks. The final feature map is flattened in (h, w, c)
row-major order, power normalized and packed into complex symbols. The
decoder mirrors the encoder with TConv-Norm-PReLU (TCBP) blocks, each a
transposed convolution followed by a regular refinement convolution, and a
Conv-Norm-Sigmoid (CBS) head that pins the reconstruction to (0, 1).

Checkpoints are versioned manifests: format version, a config echo, the
named parameter/buffer tensors with shapes, and a content checksum; they
round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .channel import Channel, DeepFadeError, equalize, from_complex, measure_snr, power_normalize
from .cse import embed_noise_map
from .mga import MaskGuidedAttention, downsample_mask

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the target model."""


@dataclass
class CodecConfig:
    """Architecture and conditioning switches for the encoder/decoder pair."""

    stage_channels: tuple[int, ...] = (32, 64, 128, 16)
    downsample_factors: tuple[int, ...] = (2, 2, 2, 2)
    first_kernel_size: int = 5
    kernel_size: int = 3
    use_cse: bool = True
    use_mga: bool = False
    mga_block_indices: tuple[int, ...] = (0,)
    mga_kernel_size: int = 3
    mga_gate_bias: float = -10.0
    norm: str = "batch"  # "batch" | "instance" (small-batch fallback)
    cse_stop_gradient: bool = True
    cse_log_scale: bool = False

    def __post_init__(self) -> None:
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.downsample_factors = tuple(int(f) for f in self.downsample_factors)
        self.mga_block_indices = tuple(int(i) for i in self.mga_block_indices)
        if len(self.stage_channels) != len(self.downsample_factors):
            raise ValueError("stage_channels and downsample_factors must align")
        if not self.stage_channels:
            raise ValueError("need at least one stage")
        if any(c < 1 for c in self.stage_channels) or any(f < 1 for f in self.downsample_factors):
            raise ValueError("channels and factors must be positive")
        if self.norm not in ("batch", "instance"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.use_mga:
            bad = [i for i in self.mga_block_indices if not 0 <= i < len(self.stage_channels)]
            if bad:
                raise ValueError(f"mga_block_indices out of range: {bad}")

    @property
    def latent_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_downsample(self) -> int:
        return math.prod(self.downsample_factors)

    def latent_hw(self, height: int, width: int) -> tuple[int, int]:
        f = self.total_downsample
        if height % f or width % f:
            raise ValueError(f"resolution {height}x{width} not divisible by {f}")
        return height // f, width // f

    def num_symbols(self, height: int, width: int) -> int:
        h, w = self.latent_hw(height, width)
        n = h * w * self.latent_channels
        if n % 2:
            raise ValueError(f"latent dimension {n} must be even for complex packing")
        return n // 2

    def bandwidth_ratio(self, height: int, width: int) -> float:
        """Complex channel symbols per source dimension, k / (H*W*3)."""
        return self.num_symbols(height, width) / (height * width * 3)


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True, track_running_stats=True)


class SEBlock(nn.Module):
    """One encoder stage: noise-map embed, then strided Conv-Norm-PReLU."""

    def __init__(self, in_channels: int, out_channels: int, factor: int, kernel_size: int, config: CodecConfig):
        super().__init__()
        self.config = config
        self.factor = factor
        conv_in = in_channels + 1 if config.use_cse else in_channels
        self.conv = nn.Conv2d(conv_in, out_channels, kernel_size, stride=factor, padding=kernel_size // 2)
        self.norm = _make_norm(config.norm, out_channels)
        self.act = nn.PReLU(out_channels)

    def forward(self, x: torch.Tensor, snr_db: float) -> torch.Tensor:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by stage factor {self.factor}"
            )
        if self.config.use_cse:
            x = embed_noise_map(
                x, snr_db,
                stop_gradient=self.config.cse_stop_gradient,
                log_scale=self.config.cse_log_scale,
            )
        return self.act(self.norm(self.conv(x)))


class SDBlock(nn.Module):
    """One decoder stage: noise-map embed, transposed conv upsample, conv refine."""

    def __init__(self, in_channels: int, out_channels: int, factor: int, kernel_size: int, config: CodecConfig):
        super().__init__()
        self.config = config
        conv_in = in_channels + 1 if config.use_cse else in_channels
        self.tconv = nn.ConvTranspose2d(
            conv_in, out_channels, kernel_size,
            stride=factor, padding=kernel_size // 2, output_padding=factor - 1,
        )
        self.norm1 = _make_norm(config.norm, out_channels)
        self.act1 = nn.PReLU(out_channels)
        self.refine = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = _make_norm(config.norm, out_channels)
        self.act2 = nn.PReLU(out_channels)

    def forward(self, x: torch.Tensor, snr_db: float) -> torch.Tensor:
        if self.config.use_cse:
            x = embed_noise_map(
                x, snr_db,
                stop_gradient=self.config.cse_stop_gradient,
                log_scale=self.config.cse_log_scale,
            )
        x = self.act1(self.norm1(self.tconv(x)))
        return self.act2(self.norm2(self.refine(x)))


class SemanticEncoder(nn.Module):
    """Multi-stage downsampling encoder ending in unit-power complex symbols."""

    def __init__(self, config: CodecConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        blocks = []
        prev = in_channels
        for i, (ch, f) in enumerate(zip(config.stage_channels, config.downsample_factors)):
            k = config.first_kernel_size if i == 0 else config.kernel_size
            blocks.append(SEBlock(prev, ch, f, k, config))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        if config.use_mga:
            self.mga = nn.ModuleDict({
                str(i): MaskGuidedAttention(
                    config.stage_channels[i],
                    kernel_size=config.mga_kernel_size,
                    gate_bias=config.mga_gate_bias,
                )
                for i in config.mga_block_indices
            })

    def forward(self, s: torch.Tensor, m: torch.Tensor | None, snr_db: float) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked image (N,3,H,W) -> (complex symbols (N,k), power scale (N,)).

        The mask is only consumed when mask-guided attention is enabled; the
        plain encoder is mask-independent by construction.
        """
        if s.dim() != 4:
            raise ValueError(f"expected (N,3,H,W) input, got shape {tuple(s.shape)}")
        self.config.latent_hw(s.shape[-2], s.shape[-1])
        x = s
        for i, block in enumerate(self.blocks):
            x = block(x, snr_db)
            if self.config.use_mga and str(i) in getattr(self, "mga", {}):
                if m is None:
                    raise ValueError("mask required when mask-guided attention is enabled")
                m_ds = downsample_mask(m.to(x.dtype), (x.shape[-2], x.shape[-1]))
                x = self.mga[str(i)](x, m_ds)
        flat = x.permute(0, 2, 3, 1).flatten(start_dim=1)  # (h, w, c) row-major
        return power_normalize(flat)


class SemanticDecoder(nn.Module):
    """Mirrored multi-stage upsampling decoder with a sigmoid output head."""

    def __init__(self, config: CodecConfig, out_channels: int = 3):
        super().__init__()
        self.config = config
        up_channels = list(reversed(config.stage_channels[:-1])) + [config.stage_channels[0]]
        factors = list(reversed(config.downsample_factors))
        blocks = []
        prev = config.latent_channels
        for ch, f in zip(up_channels, factors):
            blocks.append(SDBlock(prev, ch, f, config.kernel_size, config))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.head_conv = nn.Conv2d(prev, out_channels, 3, padding=1)
        self.head_norm = _make_norm(config.norm, out_channels)

    def forward(self, z: torch.Tensor, snr_db: float, latent_hw: tuple[int, int]) -> torch.Tensor:
        """Complex symbols (N,k) -> reconstruction (N,3,H,W) with values in (0,1)."""
        h, w = latent_hw
        c = self.config.latent_channels
        if z.dim() != 2 or z.shape[-1] * 2 != h * w * c:
            raise ValueError(
                f"symbol count {tuple(z.shape)} does not match latent {h}x{w}x{c}"
            )
        x = from_complex(z).view(z.shape[0], h, w, c).permute(0, 3, 1, 2).contiguous()
        for block in self.blocks:
            x = block(x, snr_db)
        return torch.sigmoid(self.head_norm(self.head_conv(x)))


@dataclass
class Diagnostics:
    """Per-transmission measurements surfaced by the pipeline."""

    measured_snr_db: float
    noise_variance: float
    gain: list
    power_scale: list
    bandwidth_ratio: float
    deep_fade: bool = False


class Codec(nn.Module):
    """Encoder + decoder pair; forward runs the full transmission pipeline."""

    def __init__(self, config: CodecConfig, image_channels: int = 3):
        super().__init__()
        self.config = config
        self.encoder = SemanticEncoder(config, in_channels=image_channels)
        self.decoder = SemanticDecoder(config, out_channels=image_channels)

    def forward(
        self,
        s: torch.Tensor,
        m: torch.Tensor | None,
        snr_db: float,
        channel: Channel | None = None,
    ) -> tuple[torch.Tensor, Diagnostics]:
        """encode -> transmit -> (equalize) -> decode.

        channel=None is the transparent link: symbols pass through unchanged
        and the measured SNR is +inf. Channel randomness enters autograd as
        constants, so the pipeline stays differentiable end to end. A deep
        fade falls back to the raw received signal and is flagged in the
        diagnostics rather than raised.
        """
        latent_hw = self.config.latent_hw(s.shape[-2], s.shape[-1])
        z, scale = self.encoder(s, m, snr_db)
        deep_fade = False
        if channel is None:
            z_rx = z
            measured = math.inf
            sigma2 = 0.0
            gain = [1.0 + 0.0j]
        else:
            outcome = channel.transmit(z, snr_db=snr_db)
            measured = measure_snr(outcome.gain.unsqueeze(-1) * z, outcome.received)
            sigma2 = float(outcome.noise_variance.detach().max())
            gain = [complex(g) for g in outcome.gain.detach().reshape(-1)]
            if channel.config.kind == "rayleigh" and channel.config.equalize:
                try:
                    z_rx = equalize(outcome)
                except DeepFadeError:
                    z_rx = outcome.received
                    deep_fade = True
            else:
                z_rx = outcome.received
        s_hat = self.decoder(z_rx, snr_db, latent_hw)
        diag = Diagnostics(
            measured_snr_db=measured,
            noise_variance=sigma2,
            gain=gain,
            power_scale=[float(x) for x in scale.detach().reshape(-1)],
            bandwidth_ratio=self.config.bandwidth_ratio(s.shape[-2], s.shape[-1]),
            deep_fade=deep_fade,
        )
        return s_hat, diag


def _state_checksum(state: dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(path, codec: Codec, extra: dict | None = None) -> None:
    """Write a versioned checkpoint manifest; round-trips bit-exactly."""
    state = {k: v.detach().cpu() for k, v in codec.state_dict().items()}
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "codec_config": asdict(codec.config),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "checksum": _state_checksum(state),
        "tensors": state,
        "extra": extra or {},
    }
    torch.save(manifest, path)


def load_manifest(path) -> dict:
    try:
        manifest = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - surface as a checkpoint error
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')} in {path}"
        )
    state = manifest["tensors"]
    if _state_checksum(state) != manifest["checksum"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    for name, shape in manifest["shapes"].items():
        if list(state[name].shape) != shape:
            raise CheckpointError(f"shape manifest mismatch for {name} in {path}")
    return manifest


def load_checkpoint(path) -> tuple[Codec, dict]:
    """Rebuild the codec a checkpoint was saved from and restore its weights."""
    manifest = load_manifest(path)
    cfg = manifest["codec_config"]
    config = CodecConfig(**cfg)
    codec = Codec(config)
    codec.load_state_dict(manifest["tensors"], strict=True)
    return codec, manifest


def warm_start(codec: Codec, manifest: dict, allow_missing_prefixes: tuple[str, ...] = ("encoder.mga",)) -> None:
    """Load shared tensors from a manifest into a structurally larger model.

    Every tensor present in both must match shape exactly; tensors present
    only in the target model must live under one of allow_missing_prefixes
    (freshly inserted attention blocks). Anything else is a load error that
    names the offending tensors.
    """
    source = manifest["tensors"]
    target = codec.state_dict()
    unexpected = sorted(set(source) - set(target))
    if unexpected:
        raise CheckpointError(f"checkpoint tensors not in model: {unexpected}")
    mismatched = [
        name for name in source if tuple(source[name].shape) != tuple(target[name].shape)
    ]
    if mismatched:
        raise CheckpointError(f"shape mismatch for tensors: {sorted(mismatched)}")
    missing = sorted(set(target) - set(source))
    stray = [n for n in missing if not n.startswith(allow_missing_prefixes)]
    if stray:
        raise CheckpointError(f"model tensors absent from checkpoint: {stray}")
    codec.load_state_dict(source, strict=False)
