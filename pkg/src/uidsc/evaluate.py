"""SNR-sweep evaluation protocol and single-image transmission demos.

A sweep measures every model at every grid SNR: each test image is
transmitted over several independent channel realizations, full-image and
masked-region metrics are averaged, and the table reports mean, standard
error and sample count per (model, snr, region, metric) cell. Channel seeds
derive deterministically from (sweep seed, model, snr, image, realization),
so the table is reproducible and the work is embarrassingly parallel in
principle.

The combination curve stitches together fixed-SNR-trained baselines: at each
evaluation SNR it copies the row of the model whose training SNR is nearest
(ties break toward the lower training SNR).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import Channel, ChannelConfig
from .codec import Codec
from .data import DatasetManifest, load_image, load_mask, save_image, save_mask
from .metrics import MetricRecord, full_metrics, masked_metrics
from .skb import IntentRequest, MaskProvider, apply_mask

DEFAULT_SNR_GRID = tuple(float(x) for x in np.arange(-5.0, 25.0 + 1e-9, 2.5))

TABLE_COLUMNS = ("model", "channel", "snr_db", "region", "metric", "mean", "stderr", "n")


@dataclass
class SweepSpec:
    channel_kind: str = "awgn"
    snr_grid_db: tuple[float, ...] = DEFAULT_SNR_GRID
    realizations: int = 10
    seed: int = 0
    max_images: int | None = None
    image_size: int | None = None  # None keeps native resolution
    equalize: bool = True

    def __post_init__(self) -> None:
        if not self.snr_grid_db:
            raise ValueError("empty SNR grid")
        if self.realizations < 1:
            raise ValueError("need at least one realization per (image, snr)")


def _tensors_from_entry(entry, size: int | None):
    from .data import crop_or_pad

    image = load_image(entry.image_path)
    mask = load_mask(entry.mask_path) if entry.mask_path else np.ones(image.shape[:2] + (1,), np.float32)
    if size is not None:
        image, mask = crop_or_pad(image, mask, size=size, rng=None)
    s = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    m = torch.from_numpy(np.ascontiguousarray(mask.transpose(2, 0, 1)))[None]
    return image, mask, s, m


def _reconstruct(codec: Codec, s, m, snr_db: float, channel: Channel | None) -> np.ndarray:
    with torch.no_grad():
        s_hat, _ = codec(s, m, snr_db, channel)
    return np.ascontiguousarray(s_hat[0].numpy().transpose(1, 2, 0)).astype(np.float64)


def sweep(
    spec: SweepSpec,
    models: dict[str, Codec],
    manifest: DatasetManifest,
    backbone: dict | None = None,
) -> list[dict]:
    """Evaluate every model over the SNR grid; returns table rows (dicts).

    Rows follow TABLE_COLUMNS. snr = +inf rows use the transparent channel
    (noiseless autoencoder quality).
    """
    if len(manifest) == 0:
        raise ValueError("empty evaluation manifest")
    entries = manifest.entries[: spec.max_images] if spec.max_images else manifest.entries
    rows: list[dict] = []
    for mi, (name, codec) in enumerate(sorted(models.items())):
        codec.eval()
        for si, snr_db in enumerate(spec.snr_grid_db):
            samples: dict[tuple[str, str], list[float]] = {}
            for ii, entry in enumerate(entries):
                image, mask, s, m = _tensors_from_entry(entry, spec.image_size)
                for r in range(spec.realizations):
                    if math.isinf(snr_db) and snr_db > 0:
                        channel = None
                    else:
                        task_seed = int(
                            np.random.SeedSequence([spec.seed, mi, si, ii, r]).generate_state(1)[0]
                        )
                        channel = Channel(ChannelConfig(
                            kind=spec.channel_kind, snr_db=snr_db,
                            equalize=spec.equalize, seed=task_seed,
                        ))
                    recon = _reconstruct(codec, s, m, snr_db, channel)
                    full = full_metrics(image.astype(np.float64), recon, backbone)
                    records = [full]
                    if mask.any() and not mask.all():
                        records.append(masked_metrics(image.astype(np.float64), recon, mask, backbone))
                    elif mask.all():
                        records.append(MetricRecord(full.psnr_db, full.ssim, full.lpips, "masked"))
                    for rec in records:
                        for metric, value in (("psnr", rec.psnr_db), ("ssim", rec.ssim), ("lpips", rec.lpips)):
                            if value is None:
                                continue
                            samples.setdefault((rec.region, metric), []).append(value)
            for (region, metric), values in sorted(samples.items()):
                arr = np.asarray(values, dtype=float)
                n = len(values)
                stderr = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                rows.append({
                    "model": name, "channel": spec.channel_kind, "snr_db": snr_db,
                    "region": region, "metric": metric,
                    "mean": float(arr.mean()), "stderr": stderr, "n": n,
                })
    return rows


def combination_curve(
    rows: list[dict],
    model_by_train_snr: dict[float, str],
    grid: tuple[float, ...] | None = None,
    name: str = "djscc_combination",
) -> list[dict]:
    """Assemble the per-SNR best-matching fixed-baseline curve.

    At each grid SNR the row of the model whose training SNR is nearest is
    copied (ties -> lower training SNR) and annotated with its source.
    """
    if not model_by_train_snr:
        raise ValueError("empty fixed-model map")
    if grid is None:
        grid = tuple(sorted({r["snr_db"] for r in rows}))
    train_snrs = sorted(model_by_train_snr)
    out = []
    for snr_db in grid:
        nearest = min(train_snrs, key=lambda t: (abs(t - snr_db), t))
        source = model_by_train_snr[nearest]
        for row in rows:
            if row["model"] == source and row["snr_db"] == snr_db:
                merged = dict(row)
                merged["model"] = name
                merged["selected_from"] = source
                out.append(merged)
    return out


def save_table(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = sorted({k for r in rows for k in r} - set(TABLE_COLUMNS))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(TABLE_COLUMNS) + extra)
        writer.writeheader()
        writer.writerows(rows)


def load_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            for key in ("snr_db", "mean", "stderr"):
                rec[key] = float(rec[key])
            rec["n"] = int(rec["n"])
            rows.append(rec)
        return rows


def write_plot_data(rows: list[dict], out_dir, region: str = "full") -> list[Path]:
    """One curve file per metric: columns model, snr_db, mean, stderr."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    metrics = sorted({r["metric"] for r in rows})
    for metric in metrics:
        sel = [r for r in rows if r["metric"] == metric and r["region"] == region]
        if not sel:
            continue
        channel = sel[0]["channel"]
        path = out_dir / f"curve_{metric}_{channel}_{region}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "snr_db", "mean", "stderr"])
            for row in sorted(sel, key=lambda r: (r["model"], r["snr_db"])):
                writer.writerow([row["model"], row["snr_db"], row["mean"], row["stderr"]])
        paths.append(path)
    return paths


def transmit_demo(
    image: np.ndarray,
    image_id,
    instruction: str,
    snr_db: float,
    channel_config: ChannelConfig,
    codec: Codec,
    provider: MaskProvider,
    out_dir,
    backbone: dict | None = None,
) -> tuple[dict[str, str], MetricRecord]:
    """Resolve the instruction to a mask, transmit, and save the 4-panel set.

    Writes original.png, mask.png, masked_input.png, reconstruction.png and
    metrics.json (masked-region metrics of the reconstruction against the
    masked input). Deterministic given the channel seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = provider.provide_mask(IntentRequest(instruction=instruction, image=image, image_id=image_id))
    masked = apply_mask(image, mask)
    s = torch.from_numpy(np.ascontiguousarray(masked.transpose(2, 0, 1)))[None].float()
    m = torch.from_numpy(np.ascontiguousarray(mask.transpose(2, 0, 1)))[None].float()
    codec.eval()
    channel = Channel(channel_config)
    recon = _reconstruct(codec, s, m, snr_db, channel)
    paths = {
        "original": out_dir / "original.png",
        "mask": out_dir / "mask.png",
        "masked_input": out_dir / "masked_input.png",
        "reconstruction": out_dir / "reconstruction.png",
    }
    save_image(paths["original"], image)
    save_mask(paths["mask"], mask)
    save_image(paths["masked_input"], masked)
    save_image(paths["reconstruction"], recon)
    record = masked_metrics(masked.astype(np.float64), recon, mask, backbone)
    import json

    with open(out_dir / "metrics.json", "w") as fh:
        json.dump({
            "psnr_db": record.psnr_db, "ssim": record.ssim,
            "lpips": record.lpips, "region": record.region,
            "snr_db": snr_db, "channel": channel_config.kind,
        }, fh, indent=2)
    return {k: str(v) for k, v in paths.items()}, record
