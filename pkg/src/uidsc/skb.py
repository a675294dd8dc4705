"""Mask providers: turn (image, natural-language instruction) into an ROI mask.

Two implementations sit behind one interface. The annotation oracle resolves
instructions of the form ``transmit:<category>[#<instance-index>]`` against
an instance-segmentation annotation file and rasterizes the union of the
matching instances, which makes desk-scale runs deterministic and model-free.
Free-text instructions fall through to a remote segmentation service speaking
a small versioned JSON protocol:

    request:  {"version": 1, "image": <base64 PNG>, "instruction": <utf-8>}
    response: {"version": 1, "mask_rle": [counts...], "height": H,
               "width": W, "confidence": <float>}

where mask_rle is row-major run-length counts, alternating zero/one runs and
starting with a zero run. Remote results are cached on disk keyed by
(image hash, instruction hash); cache writes are atomic.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

WIRE_FORMAT_VERSION = 1
CACHE_DIR_ENV = "UIDSC_CACHE_DIR"

_ORACLE_PATTERN = re.compile(r"^transmit:([^#]+?)(?:#(\d+))?$")


class IntentResolutionError(ValueError):
    """The instruction could not be resolved to a region."""


class MaskServiceError(RuntimeError):
    """The remote mask service failed, timed out, or answered garbage."""


@dataclass
class IntentRequest:
    """An image (array and/or annotation id) plus the user's instruction."""

    instruction: str
    image: np.ndarray | None = None
    image_id: int | str | None = None

    def __post_init__(self) -> None:
        if not self.instruction or not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


def parse_oracle_instruction(text: str) -> tuple[str, int | None] | None:
    """`transmit:<category>[#<idx>]` -> (category, idx); None for free text."""
    match = _ORACLE_PATTERN.match(text.strip())
    if match is None:
        return None
    return match.group(1).strip(), int(match.group(2)) if match.group(2) else None


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise product s = m * I, mask broadcast over the color channels."""
    if mask.ndim == 3 and mask.shape[-1] == 1:
        m = mask[..., 0]
    elif mask.ndim == 2:
        m = mask
    else:
        raise ValueError(f"expected (H,W,1) or (H,W) mask, got shape {mask.shape}")
    if image.shape[:2] != m.shape:
        raise ValueError(f"image {image.shape[:2]} vs mask {m.shape} spatial mismatch")
    return image * m[..., None]


# ---------------------------------------------------------------------------
# Run-length encodings.
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major RLE of a binary mask: alternating runs, zero run first."""
    flat = (np.asarray(mask).reshape(-1) > 0.5).astype(np.uint8)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(counts: list[int], height: int, width: int) -> np.ndarray:
    """Inverse of rle_encode; returns an (H, W, 1) float32 mask in {0, 1}."""
    total = sum(counts)
    if total != height * width:
        raise ValueError(f"RLE covers {total} pixels, expected {height * width}")
    flat = np.zeros(height * width, dtype=np.float32)
    pos = 0
    for i, run in enumerate(counts):
        if i % 2 == 1:
            flat[pos:pos + run] = 1.0
        pos += run
    return flat.reshape(height, width, 1)


def _coco_decompress_counts(s: str) -> list[int]:
    """Decode the compact string form of segmentation counts (LEB-style,
    char-offset 48, 5 data bits per char, delta-coded from the second pair)."""
    counts: list[int] = []
    i = 0
    while i < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[i]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            i += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def decode_annotation_rle(counts, height: int, width: int) -> np.ndarray:
    """Decode annotation-file RLE (column-major layout) to an (H, W, 1) mask."""
    if isinstance(counts, str):
        counts = _coco_decompress_counts(counts)
    total = sum(counts)
    if total != height * width:
        raise ValueError(f"RLE covers {total} pixels, expected {height * width}")
    flat = np.zeros(height * width, dtype=np.float32)
    pos = 0
    for i, run in enumerate(counts):
        if i % 2 == 1:
            flat[pos:pos + run] = 1.0
        pos += run
    return flat.reshape(width, height).T[..., None].copy()


def rasterize_polygons(polygons: list[list[float]], height: int, width: int) -> np.ndarray:
    """Fill flat [x0, y0, x1, y1, ...] polygons into an (H, W, 1) binary mask."""
    canvas = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        if len(poly) < 6:
            continue
        draw.polygon([(poly[j], poly[j + 1]) for j in range(0, len(poly), 2)], fill=1)
    return np.asarray(canvas, dtype=np.float32)[..., None]


def annotation_to_mask(ann: dict, height: int, width: int) -> np.ndarray:
    seg = ann["segmentation"]
    if isinstance(seg, dict):
        h, w = seg["size"]
        if (h, w) != (height, width):
            raise ValueError(f"RLE size {(h, w)} does not match image {(height, width)}")
        return decode_annotation_rle(seg["counts"], height, width)
    return rasterize_polygons(seg, height, width)


# ---------------------------------------------------------------------------
# Providers.
# ---------------------------------------------------------------------------

class MaskProvider:
    """Interface: provide_mask(request) -> binary (H, W, 1) float32 mask."""

    def provide_mask(self, req: IntentRequest) -> np.ndarray:
        raise NotImplementedError


class AnnotationOracle(MaskProvider):
    """Ground-truth masks from an instance-segmentation annotation file.

    Resolves only the `transmit:<category>[#<idx>]` grammar. The instance
    index selects one annotation (0-based, ordered by annotation id);
    without it, the union of all matching instances is returned.
    """

    def __init__(self, dataset: dict):
        self.images = {img["id"]: img for img in dataset.get("images", [])}
        self.categories = {}
        for cat in dataset.get("categories", []):
            self.categories[cat["name"].strip().lower()] = cat["id"]
        self.by_image: dict = {}
        for ann in sorted(dataset.get("annotations", []), key=lambda a: a["id"]):
            self.by_image.setdefault(ann["image_id"], []).append(ann)

    @classmethod
    def from_file(cls, path) -> "AnnotationOracle":
        import json

        with open(path) as fh:
            return cls(json.load(fh))

    def provide_mask(self, req: IntentRequest) -> np.ndarray:
        parsed = parse_oracle_instruction(req.instruction)
        if parsed is None:
            raise IntentResolutionError(
                f"instruction {req.instruction!r} does not match the oracle grammar"
            )
        category, index = parsed
        cat_id = self.categories.get(category.lower())
        if cat_id is None:
            raise IntentResolutionError(f"unknown category {category!r}")
        if req.image_id is None or req.image_id not in self.images:
            raise IntentResolutionError(f"unknown image id {req.image_id!r}")
        info = self.images[req.image_id]
        height, width = info["height"], info["width"]
        matches = [a for a in self.by_image.get(req.image_id, []) if a["category_id"] == cat_id]
        if not matches:
            raise IntentResolutionError(
                f"no {category!r} instances annotated in image {req.image_id!r}"
            )
        if index is not None:
            if index >= len(matches):
                raise IntentResolutionError(
                    f"instance #{index} out of range ({len(matches)} present)"
                )
            matches = [matches[index]]
        mask = np.zeros((height, width, 1), dtype=np.float32)
        for ann in matches:
            mask = np.maximum(mask, annotation_to_mask(ann, height, width))
        return mask


def _encode_image_png(image: np.ndarray) -> bytes:
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0, 0, 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


class RemoteMaskClient(MaskProvider):
    """Client for an external segmentation service (the heavy model lives there)."""

    def __init__(self, endpoint: str, timeout: float = 30.0, session=None):
        self.endpoint = endpoint
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def provide_mask(self, req: IntentRequest) -> np.ndarray:
        if req.image is None:
            raise MaskServiceError("remote provider needs the image array")
        payload = {
            "version": WIRE_FORMAT_VERSION,
            "image": base64.b64encode(_encode_image_png(req.image)).decode("ascii"),
            "instruction": req.instruction,
        }
        try:
            resp = self.session.post(self.endpoint, json=payload, timeout=self.timeout)
        except Exception as exc:  # noqa: BLE001 - any transport failure is a service error
            raise MaskServiceError(f"mask service unreachable: {exc}") from exc
        if getattr(resp, "status_code", 500) != 200:
            raise MaskServiceError(f"mask service returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            if body["version"] != WIRE_FORMAT_VERSION:
                raise MaskServiceError(f"unsupported wire version {body['version']}")
            mask = rle_decode(body["mask_rle"], body["height"], body["width"])
        except MaskServiceError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise MaskServiceError(f"malformed mask service response: {exc}") from exc
        if mask.shape[:2] != req.image.shape[:2]:
            raise MaskServiceError(
                f"service mask {mask.shape[:2]} does not match image {req.image.shape[:2]}"
            )
        return (mask >= 0.5).astype(np.float32)


class MaskCache:
    """Disk cache of masks keyed by (image hash, instruction hash)."""

    def __init__(self, directory: str | os.PathLike | None = None):
        if directory is None:
            directory = os.environ.get(CACHE_DIR_ENV)
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, image: np.ndarray, instruction: str) -> Path:
        ih = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:32]
        th = hashlib.sha256(instruction.encode()).hexdigest()[:32]
        return self.directory / f"{ih}_{th}.npy"

    def get(self, image: np.ndarray, instruction: str) -> np.ndarray | None:
        if self.directory is None:
            return None
        path = self._path(image, instruction)
        return np.load(path) if path.exists() else None

    def put(self, image: np.ndarray, instruction: str, mask: np.ndarray) -> None:
        if self.directory is None:
            return
        path = self._path(image, instruction)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.save(fh, mask)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


class IntentMaskProvider(MaskProvider):
    """Routes requests: oracle grammar -> oracle, free text -> remote service.

    Remote results go through the disk cache when one is configured. A free
    text instruction with no remote endpoint is an intent-resolution error.
    """

    def __init__(
        self,
        oracle: AnnotationOracle | None = None,
        remote: RemoteMaskClient | None = None,
        cache: MaskCache | None = None,
    ):
        self.oracle = oracle
        self.remote = remote
        self.cache = cache or MaskCache()

    def provide_mask(self, req: IntentRequest) -> np.ndarray:
        if parse_oracle_instruction(req.instruction) is not None:
            if self.oracle is None:
                raise IntentResolutionError("no annotation oracle configured")
            return self.oracle.provide_mask(req)
        if self.remote is None:
            raise IntentResolutionError(
                f"free-text instruction {req.instruction!r} needs the remote provider"
            )
        if req.image is not None:
            cached = self.cache.get(req.image, req.instruction)
            if cached is not None:
                return cached
        mask = self.remote.provide_mask(req)
        if req.image is not None:
            self.cache.put(req.image, req.instruction, mask)
        return mask
