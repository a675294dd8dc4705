"""Dataset construction and batching.

Splits are built from instance-segmentation annotations: ORI keeps the
original images, and every selected annotated instance contributes an
aligned (SEG, MASK) pair where SEG = mask * image stored losslessly. A
synthetic generator produces desk-scale corpora of geometric shapes with
exact analytic masks plus a matching annotation file, so the whole pipeline
(including the annotation oracle) runs without any external dataset.

Manifests are line-delimited JSON records {split, image, mask, image_id};
SEG manifests carry their mask paths inline so the pair stays index-aligned
by construction.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .skb import apply_mask, rle_encode


class DataError(RuntimeError):
    """Dataset inputs missing, malformed, or too broken to continue."""


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str | None
    image_id: int | str


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    resolution: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({
                    "split": self.split,
                    "image": e.image_path,
                    "mask": e.mask_path,
                    "image_id": e.image_id,
                }) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    split = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            split = rec["split"]
            entries.append(ManifestEntry(rec["image"], rec.get("mask"), rec["image_id"]))
    if not entries:
        raise DataError(f"manifest is empty: {path}")
    return DatasetManifest(split=split, entries=entries)


def load_image(path) -> np.ndarray:
    """Decode an image file to float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Store float [0,1] pixels losslessly as 8-bit PNG."""
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32)
    return (arr >= 127.5).astype(np.float32)[..., None]


def save_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask).squeeze() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def crop_or_pad(
    image: np.ndarray,
    mask: np.ndarray | None,
    size: int = 256,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Force an image (and its mask) to size x size.

    Dimensions larger than size are cropped at a uniform random offset
    (seeded rng; top-left corner without one); smaller dimensions are
    zero-padded bottom/right. Image and mask share the same geometry.
    """
    h, w = image.shape[:2]
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate image shape {image.shape}")
    pads = [(0, max(0, size - h)), (0, max(0, size - w))]
    image = np.pad(image, pads + [(0, 0)] * (image.ndim - 2))
    if mask is not None:
        mask = np.pad(mask, pads + [(0, 0)] * (mask.ndim - 2))
    h, w = image.shape[:2]
    top = 0 if h == size or rng is None else int(rng.integers(0, h - size + 1))
    left = 0 if w == size or rng is None else int(rng.integers(0, w - size + 1))
    image = image[top:top + size, left:left + size]
    if mask is not None:
        mask = mask[top:top + size, left:left + size]
    return image, mask


def build_splits(
    annotation_file,
    image_dir,
    out_dir,
    val_annotation_file=None,
    val_image_dir=None,
    test_size: int = 1000,
    seed: int = 0,
    max_skip_fraction: float = 0.1,
) -> dict[str, DatasetManifest]:
    """Construct ORI/SEG/MASK training splits (and SEG-test from a val pool).

    Each annotated instance becomes one aligned (SEG, MASK) pair. Broken
    items are skipped with an itemized report; more than max_skip_fraction
    skipped is a hard error. Everything written is lossless PNG.
    """
    out_dir = Path(out_dir)
    manifests: dict[str, DatasetManifest] = {}
    train_ids, report = _build_instance_split(
        annotation_file, image_dir, out_dir, "train", manifests, max_skip_fraction,
    )
    if val_annotation_file is not None:
        val_ids, _ = _build_instance_split(
            val_annotation_file, val_image_dir, out_dir, "test", manifests,
            max_skip_fraction, sample=test_size, seed=seed, exclude_ids=train_ids,
        )
        overlap = train_ids & val_ids
        if overlap:
            raise DataError(f"test split overlaps training ids: {sorted(overlap)[:5]}...")
    for name, manifest in manifests.items():
        manifest.save(out_dir / f"{name.lower()}.jsonl")
    if report:
        with open(out_dir / "skip_report.json", "w") as fh:
            json.dump(report, fh, indent=2)
    return manifests


def _build_instance_split(
    annotation_file, image_dir, out_dir, tag, manifests, max_skip_fraction,
    sample=None, seed=0, exclude_ids=frozenset(),
):
    from .skb import annotation_to_mask

    try:
        with open(annotation_file) as fh:
            dataset = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse annotation file {annotation_file}: {exc}") from exc
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    images = {img["id"]: img for img in dataset.get("images", [])}
    eligible_ids = sorted(i for i in images if i not in exclude_ids)
    if sample is not None and len(eligible_ids) > sample:
        rng = np.random.default_rng(seed)
        eligible_ids = sorted(rng.choice(eligible_ids, size=sample, replace=False).tolist())
    keep = set(eligible_ids)

    for sub in ("ori", "seg", "mask"):
        (out_dir / f"{sub}_{tag}").mkdir(parents=True, exist_ok=True)

    ori = DatasetManifest(split=f"ORI-{tag}")
    seg = DatasetManifest(split=f"SEG-{tag}")
    msk = DatasetManifest(split=f"MASK-{tag}")
    report: list[dict] = []
    total = 0

    loaded: dict = {}
    for image_id in eligible_ids:
        info = images[image_id]
        src = image_dir / info["file_name"]
        total += 1
        if not src.exists():
            report.append({"image_id": image_id, "reason": f"missing file {src}"})
            continue
        dst = out_dir / f"ori_{tag}" / info["file_name"]
        if not dst.exists():
            try:
                dst.hardlink_to(src)
            except OSError:
                shutil.copy2(src, dst)
        ori.entries.append(ManifestEntry(str(dst), None, image_id))
        loaded[image_id] = info

    anns = sorted(dataset.get("annotations", []), key=lambda a: a["id"])
    for ann in anns:
        image_id = ann["image_id"]
        if image_id not in keep or image_id not in loaded:
            continue
        info = loaded[image_id]
        total += 1
        try:
            mask = annotation_to_mask(ann, info["height"], info["width"])
        except Exception as exc:  # noqa: BLE001 - itemized skip
            report.append({"annotation_id": ann["id"], "reason": str(exc)})
            continue
        if mask.sum() == 0:
            report.append({"annotation_id": ann["id"], "reason": "empty mask"})
            continue
        image = load_image(out_dir / f"ori_{tag}" / info["file_name"])
        stem = f"{image_id}_{ann['id']}"
        seg_path = out_dir / f"seg_{tag}" / f"{stem}.png"
        mask_path = out_dir / f"mask_{tag}" / f"{stem}.png"
        save_image(seg_path, apply_mask(image, mask))
        save_mask(mask_path, mask)
        seg.entries.append(ManifestEntry(str(seg_path), str(mask_path), image_id))
        msk.entries.append(ManifestEntry(str(mask_path), None, image_id))

    if total and len(report) > max_skip_fraction * total:
        raise DataError(
            f"{len(report)}/{total} items skipped (> {max_skip_fraction:.0%}): "
            + "; ".join(r["reason"] for r in report[:5])
        )
    manifests[f"ori_{tag}"] = ori
    manifests[f"seg_{tag}"] = seg
    manifests[f"mask_{tag}"] = msk
    return set(loaded), report


# ---------------------------------------------------------------------------
# Synthetic corpus.
# ---------------------------------------------------------------------------

def _synth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.9, size=(max(size // 8, 1), max(size // 8, 1), 3))
    bg = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    return np.clip(bg + rng.normal(0, 0.03, size=(size, size, 3)), 0, 1)


def _synth_shape(rng: np.random.Generator, size: int) -> tuple[str, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    kind = "ellipse" if rng.random() < 0.5 else "rectangle"
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    ax = rng.uniform(0.12, 0.3) * size
    ay = rng.uniform(0.12, 0.3) * size
    if kind == "ellipse":
        mask = (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0)
    else:
        mask = (np.abs(xx - cx) <= ax) & (np.abs(yy - cy) <= ay)
    return kind, mask.astype(np.float32)[..., None]


def synth_generate(n: int, size: int, seed: int, out_dir) -> dict[str, DatasetManifest]:
    """Write n shape-on-noise images with exact masks; byte-stable per seed.

    Emits ori/seg/mask files, manifests, and an annotations.json in the
    instance-segmentation interchange layout so the annotation oracle can
    resolve `transmit:ellipse` / `transmit:rectangle` on the corpus.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    for sub in ("ori", "seg", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ori = DatasetManifest(split="SYNTH-ORI", resolution=size)
    seg = DatasetManifest(split="SYNTH-SEG", resolution=size)
    msk = DatasetManifest(split="SYNTH-MASK", resolution=size)
    categories = [{"id": 1, "name": "ellipse"}, {"id": 2, "name": "rectangle"}]
    images, annotations = [], []
    for i in range(n):
        bg = _synth_background(rng, size)
        kind, mask = _synth_shape(rng, size)
        color = rng.uniform(0.2, 1.0, size=3)
        grad = np.linspace(0.75, 1.0, size)[None, :, None]
        image = np.where(mask > 0, np.clip(color * grad, 0, 1), bg).astype(np.float32)
        stem = f"synth_{i:05d}"
        paths = {sub: out_dir / sub / f"{stem}.png" for sub in ("ori", "seg", "mask")}
        save_image(paths["ori"], image)
        save_image(paths["seg"], apply_mask(image, mask))
        save_mask(paths["mask"], mask)
        ori.entries.append(ManifestEntry(str(paths["ori"]), None, i))
        seg.entries.append(ManifestEntry(str(paths["seg"]), str(paths["mask"]), i))
        msk.entries.append(ManifestEntry(str(paths["mask"]), None, i))
        images.append({"id": i, "file_name": f"{stem}.png", "height": size, "width": size})
        annotations.append({
            "id": i,
            "image_id": i,
            "category_id": 1 if kind == "ellipse" else 2,
            "segmentation": {"size": [size, size], "counts": rle_encode(mask[..., 0].T)},
            "area": float(mask.sum()),
        })
    with open(out_dir / "annotations.json", "w") as fh:
        json.dump({"images": images, "annotations": annotations, "categories": categories}, fh)
    manifests = {"ori": ori, "seg": seg, "mask": msk}
    for name, manifest in manifests.items():
        manifest.save(out_dir / f"{name}.jsonl")
    return manifests


# ---------------------------------------------------------------------------
# Batching.
# ---------------------------------------------------------------------------

def batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    size: int | None = 256,
):
    """Yield (images (B,3,S,S), masks (B,1,S,S)) float32 torch batches.

    Shuffle order and crop offsets are fully determined by (seed, epoch);
    entries without a mask get an all-ones mask. The final short batch is
    kept.
    """
    if len(manifest) == 0:
        raise DataError("empty manifest")
    order = np.random.default_rng([seed, epoch]).permutation(len(manifest.entries))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        imgs, masks = [], []
        for j in idx:
            entry = manifest.entries[int(j)]
            image = load_image(entry.image_path)
            mask = load_mask(entry.mask_path) if entry.mask_path else None
            if size is not None:
                rng = np.random.default_rng([seed, epoch, int(j)])
                image, mask = crop_or_pad(image, mask, size=size, rng=rng)
            if mask is None:
                mask = np.ones(image.shape[:2] + (1,), dtype=np.float32)
            imgs.append(torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))))
            masks.append(torch.from_numpy(np.ascontiguousarray(mask.transpose(2, 0, 1))))
        yield torch.stack(imgs), torch.stack(masks)
