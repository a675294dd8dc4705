"""Two-stage training loops.

Stage 1 trains the codec without mask-guided attention on original images
(mask fixed to all-ones, so no region information enters). Stage 2 rebuilds
the model with attention blocks inserted, warm-starts every shared tensor
from the stage-1 checkpoint (the fresh blocks start as identities), and
fine-tunes everything on aligned (segmented image, mask) pairs.

Each batch samples one SNR from the configured distribution and one channel
realization; the loss is plain L2 between input and reconstruction. The
whole trajectory is determined by (config, seed, device).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import Channel, ChannelConfig
from .codec import Codec, CodecConfig, load_manifest, save_checkpoint, warm_start
from .data import DatasetManifest, batches


class NumericError(RuntimeError):
    """Training hit a non-finite loss; a diagnostic snapshot was written."""


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    snr_low_db: float = -5.0
    snr_high_db: float = 25.0
    fixed_snr_db: float | None = None  # point mass; overrides the range
    channel_kind: str = "awgn"
    channel_equalize: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final only
    optimizer: str = "adam"  # "adam" | "sgd"
    grad_clip: float = 1.0
    image_size: int = 256

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.fixed_snr_db is None and not self.snr_low_db <= self.snr_high_db:
            raise ValueError("empty SNR sampling range")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def sample_snr(self, rng: np.random.Generator) -> float:
        if self.fixed_snr_db is not None:
            return float(self.fixed_snr_db)
        return float(rng.uniform(self.snr_low_db, self.snr_high_db))


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    wall_clock_s: float = 0.0
    checkpoint_path: str = ""
    config: dict = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for i, loss in enumerate(self.epoch_losses):
                fh.write(json.dumps({"epoch": i, "loss": loss}) + "\n")
            fh.write(json.dumps({
                "wall_clock_s": self.wall_clock_s,
                "checkpoint": self.checkpoint_path,
                "config": self.config,
            }) + "\n")


def loss_l2(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel and batch entry."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    return (target - recon).square().mean()


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate)


def _run_loop(
    codec: Codec,
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    tag: str,
) -> tuple[TrainReport, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = _make_optimizer(config, codec.parameters())
    channel = Channel(ChannelConfig(
        kind=config.channel_kind,
        snr_db=config.fixed_snr_db if config.fixed_snr_db is not None else 10.0,
        equalize=config.channel_equalize,
        seed=config.seed,
    ))
    snr_rng = np.random.default_rng([config.seed, 0xC5E])
    report = TrainReport(config={"train": asdict(config), "codec": asdict(codec.config)})
    start = time.monotonic()
    ckpt_path = out_dir / f"{tag}.ckpt"
    codec.train()
    for epoch in range(config.epochs):
        losses = []
        for step, (s, m) in enumerate(
            batches(manifest, config.batch_size, config.seed, epoch=epoch, size=config.image_size)
        ):
            snr_db = config.sample_snr(snr_rng)
            optimizer.zero_grad()
            s_hat, _ = codec(s, m, snr_db, channel)
            loss = loss_l2(s, s_hat)
            if not torch.isfinite(loss):
                snapshot = out_dir / f"{tag}.nan-snapshot.ckpt"
                save_checkpoint(snapshot, codec, extra={
                    "epoch": epoch, "step": step, "snr_db": snr_db,
                })
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}; snapshot at {snapshot}"
                )
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(codec.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(float(loss.detach()))
        report.epoch_losses.append(float(np.mean(losses)))
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"{tag}.epoch{epoch + 1}.ckpt", codec)
    report.wall_clock_s = time.monotonic() - start
    save_checkpoint(ckpt_path, codec, extra={"stage": config.stage})
    report.checkpoint_path = str(ckpt_path)
    report.save(out_dir / f"{tag}.report.jsonl")
    return report, str(ckpt_path)


def train_stage1(
    config: TrainConfig,
    codec_config: CodecConfig,
    manifest: DatasetManifest,
    out_dir,
) -> tuple[TrainReport, str]:
    """Train the attention-free codec on original images (all-ones masks)."""
    if codec_config.use_mga:
        raise ValueError("stage 1 trains without mask-guided attention")
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    torch.manual_seed(config.seed)
    codec = Codec(codec_config)
    return _run_loop(codec, config, manifest, Path(out_dir), "stage1")


def fine_tune(
    config: TrainConfig,
    checkpoint,
    manifest: DatasetManifest,
    out_dir,
    tag: str = "finetune",
) -> tuple[TrainReport, str]:
    """Continue training a checkpointed model unchanged on a new manifest.

    Used for stage-matched ablation baselines that skip the attention
    insertion but otherwise follow the stage-2 recipe.
    """
    from .codec import load_checkpoint

    torch.manual_seed(config.seed)
    codec, _ = load_checkpoint(checkpoint)
    return _run_loop(codec, config, manifest, Path(out_dir), tag)


def train_stage2(
    config: TrainConfig,
    stage1_checkpoint,
    manifest: DatasetManifest,
    out_dir,
    mga_block_indices: tuple[int, ...] = (0,),
    mga_gate_bias: float | None = None,
) -> tuple[TrainReport, str]:
    """Insert attention blocks, warm-start from stage 1, fine-tune on (SEG, MASK).

    Every manifest entry must carry a mask path; a missing mask is an
    alignment error. All parameters stay trainable.
    """
    missing = [e.image_path for e in manifest.entries if not e.mask_path]
    if missing:
        raise ValueError(f"manifest entries missing masks: {missing[:3]}")
    ckpt = load_manifest(stage1_checkpoint)
    base_cfg = dict(ckpt["codec_config"])
    base_cfg.update(use_mga=True, mga_block_indices=tuple(mga_block_indices))
    if mga_gate_bias is not None:
        base_cfg["mga_gate_bias"] = mga_gate_bias
    codec_config = CodecConfig(**base_cfg)
    torch.manual_seed(config.seed)
    codec = Codec(codec_config)
    warm_start(codec, ckpt)
    return _run_loop(codec, config, manifest, Path(out_dir), "stage2")
