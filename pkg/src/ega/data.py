"""Synthetic single-object localization dataset and its binary file format.

Each image holds one shape (disk, square, triangle, ring or cross) over a
low-frequency value-noise background, plus a class-independent distractor
patch. A small part of every object carries a class-specific stripe
texture: the easiest cue for the classifier, covering well under half of
the object. A CAM that only fires on that part localizes poorly, which is
the situation the localization methods here are meant to improve.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, DatasetFormatError
from .fileio import atomic_write
from .localization import BoundingBox

DATASET_MAGIC = b"EGD1"
DATASET_VERSION = 1
IMAGE_SIZE = 64
SHAPES = ("disk", "square", "triangle", "ring", "cross")
SPLITS = {"train": 0, "val": 1, "test": 2}
DEFAULT_SIZES = {"train": 2000, "val": 250, "test": 500}
MIN_MASK_AREA = 64
PART_FRACTION_LIMIT = 0.4


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: int
    gt_box: BoundingBox
    gt_mask: np.ndarray  # H x W bool


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray  # N x 4, (x0, y0, x1, y1) half-open
    masks: Optional[np.ndarray]
    class_names: List[str]
    split: str
    seed: int

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        mask = self.masks[i] if self.masks is not None else None
        return Sample(self.images[i], int(self.labels[i]), BoundingBox(*map(int, self.boxes[i])), mask)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, n: int) -> "SyntheticDataset":
        masks = None if self.masks is None else self.masks[:n]
        return SyntheticDataset(self.images[:n], self.labels[:n], self.boxes[:n], masks,
                                list(self.class_names), self.split, self.seed)

    def equals(self, other: "SyntheticDataset") -> bool:
        same_masks = (self.masks is None and other.masks is None) or (
            self.masks is not None and other.masks is not None and np.array_equal(self.masks, other.masks))
        return (same_masks and self.split == other.split and self.seed == other.seed
                and self.class_names == other.class_names
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.boxes, other.boxes))


def tight_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ContractError("empty mask has no bounding box")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# -- rendering ----------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Two octaves of bilinearly interpolated lattice noise, per channel, in [0, 1]."""
    out = np.zeros((3, size, size))
    for cells, weight in ((4, 0.7), (9, 0.3)):
        grid = rng.random((3, cells, cells))
        out += weight * ndimage.zoom(grid, (1, size / cells, size / cells), order=1, mode="nearest")[:, :size, :size]
    return out


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, half: float) -> np.ndarray:
    """Membership in the canonical shape; (u, v) are rotated, centered coords."""
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= half
    if kind == "square":
        side = half / np.sqrt(2)
        return (np.abs(u) <= side) & (np.abs(v) <= side)
    if kind == "triangle":
        # equilateral, circumradius ``half``, apex at -v
        inner = half / 2
        out = v <= inner
        for ang in (np.pi / 6, 5 * np.pi / 6):
            out &= (u * np.cos(ang) - v * np.sin(ang)) <= inner
        return out
    if kind == "ring":
        return (r <= half) & (r >= 0.55 * half)
    if kind == "cross":
        # arm ends stay inside the circumcircle at any rotation
        reach = half / np.hypot(1.0, 0.36)
        arm = reach * 0.36
        return ((np.abs(u) <= arm) & (np.abs(v) <= reach)) | ((np.abs(v) <= arm) & (np.abs(u) <= reach))
    raise ValueError(kind)


# local-frame anchor of the textured part, as a fraction of the half-size
_PART_ANCHOR = {
    "disk": (0.45, -0.45),
    "square": (0.55, 0.55),
    "triangle": (0.0, -0.55),
    "ring": (0.0, -0.78),
    "cross": (0.0, 0.0),
}
_STRIPE_ANGLE = {"disk": 0.0, "square": np.pi / 4, "triangle": np.pi / 2, "ring": 3 * np.pi / 4, "cross": None}


def render_object(rng: np.random.Generator, label: int, size: int = IMAGE_SIZE):
    """One image with its object mask and the mask of the textured part."""
    kind = SHAPES[label]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    while True:
        extent = rng.uniform(12, 40)  # object diameter in pixels
        half = extent / 2
        theta = rng.uniform(0, 2 * np.pi)
        margin = half + 1
        cx, cy = rng.uniform(margin, size - margin, size=2)
        dx, dy = xx - cx, yy - cy
        c, s = np.cos(theta), np.sin(theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        mask = _shape_mask(kind, u, v, half)
        if mask.sum() >= MIN_MASK_AREA:
            break

    au, av = _PART_ANCHOR[kind]
    part = mask & (np.hypot(u - au * half, v - av * half) <= 0.42 * half)
    radius = 0.42
    while part.sum() >= PART_FRACTION_LIMIT * mask.sum() and radius > 0.05:
        radius *= 0.85
        part = mask & (np.hypot(u - au * half, v - av * half) <= radius * half)

    image = 0.15 + 0.7 * _value_noise(rng, size)
    color = rng.uniform(0.0, 1.0, size=3)
    # keep the object distinguishable from the local background mean
    bg_mean = image[:, mask].mean(axis=1)
    if np.abs(color - bg_mean).max() < 0.35:
        k = int(np.argmax(np.abs(color - bg_mean)))
        color[k] = 0.05 if bg_mean[k] > 0.5 else 0.95
    shade = 0.08 * (rng.random((size, size)) - 0.5)
    image[:, mask] = (color[:, None] + shade[mask][None, :])

    # the texture is laid out in image coordinates so its orientation is a
    # class cue that survives the object's rotation
    angle = _STRIPE_ANGLE[kind]
    period = 4.0
    if angle is None:
        pattern = ((np.floor(dx / 2.5) + np.floor(dy / 2.5)) % 2) == 0
    else:
        pattern = np.cos(2 * np.pi * (np.cos(angle) * dx + np.sin(angle) * dy) / period) > 0
    stripe = np.where(pattern, 1.0, 0.0)
    image[:, part] = 0.5 * color[:, None] + 0.5 * stripe[part][None, :]

    _add_distractor(rng, image, mask)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask, part


_DISTRACTOR = (np.indices((10, 10)).sum(axis=0) % 3 == 0)


def _add_distractor(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray):
    size = image.shape[-1]
    h, w = _DISTRACTOR.shape
    for _ in range(20):
        y, x = rng.integers(0, size - h + 1, size=2)
        if not mask[max(y - 2, 0):y + h + 2, max(x - 2, 0):x + w + 2].any():
            region = image[:, y:y + h, x:x + w]
            region[:, _DISTRACTOR] = 0.9
            region[:, ~_DISTRACTOR] = 0.2
            return


def generate(seed: int, split: str, size: int, num_classes: int = 5) -> SyntheticDataset:
    """Deterministic function of (seed, split, size, num_classes)."""
    if split not in SPLITS:
        raise ContractError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    if not 2 <= num_classes <= len(SHAPES):
        raise ContractError(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if size < num_classes:
        raise ContractError(f"size {size} smaller than class count {num_classes}")
    rng = np.random.default_rng([seed, SPLITS[split]])
    labels = rng.permutation(np.arange(size) % num_classes).astype(np.int64)
    images = np.empty((size, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    masks = np.empty((size, IMAGE_SIZE, IMAGE_SIZE), bool)
    boxes = np.empty((size, 4), np.int64)
    for i, label in enumerate(labels):
        images[i], masks[i], _ = render_object(rng, int(label))
        boxes[i] = tight_box(masks[i]).as_tuple()
    return SyntheticDataset(images, labels, boxes, masks, list(SHAPES[:num_classes]), split, seed)


# -- file I/O -----------------------------------------------------------

def _record_size(h: int, w: int, channels: int) -> int:
    return 2 + 8 + h * ((w + 7) // 8) + 4 * channels * h * w


def encode_dataset(ds: SyntheticDataset) -> bytes:
    n, ch, h, w = ds.images.shape
    manifest = {
        "class_names": ds.class_names,
        "counts": ds.class_counts(),
        "num_samples": n,
        "seed": ds.seed,
        "split": ds.split,
        "image_shape": [ch, h, w],
        "has_masks": ds.masks is not None,
    }
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    block = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    masks = ds.masks if ds.masks is not None else np.zeros((n, h, w), bool)
    for i in range(n):
        buf.write(struct.pack("<H4H", int(ds.labels[i]), *map(int, ds.boxes[i])))
        buf.write(np.packbits(masks[i], axis=1).tobytes())
        buf.write(np.asarray(ds.images[i], dtype="<f4").tobytes())
    return buf.getvalue()


def decode_dataset(blob: bytes) -> SyntheticDataset:
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(blob) < 10:
        raise DatasetFormatError("truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}, expected {DATASET_VERSION}")
    (mlen,) = struct.unpack_from("<I", blob, 6)
    if 10 + mlen > len(blob):
        raise DatasetFormatError("truncated manifest block")
    try:
        manifest = json.loads(blob[10:10 + mlen].decode("utf-8"))
    except ValueError as exc:
        raise DatasetFormatError(f"malformed manifest: {exc}") from exc
    ch, h, w = manifest["image_shape"]
    n = manifest["num_samples"]
    rsize = _record_size(h, w, ch)
    body = memoryview(blob)[10 + mlen:]
    if len(body) != n * rsize:
        raise DatasetFormatError(
            f"manifest declares {n} samples but body holds {len(body) / rsize:g} records of {rsize} bytes")
    mbytes = h * ((w + 7) // 8)
    rec = np.frombuffer(body, dtype=np.uint8).reshape(n, rsize)
    head = rec[:, :10].copy().view("<u2").reshape(n, 5)
    masks = np.unpackbits(rec[:, 10:10 + mbytes].reshape(n, h, -1), axis=2)[:, :, :w].astype(bool)
    images = rec[:, 10 + mbytes:].copy().view("<f4").reshape(n, ch, h, w).astype(np.float32)
    labels = head[:, 0].astype(np.int64)
    boxes = head[:, 1:].astype(np.int64)
    if not manifest.get("has_masks", True):
        masks = None
    ds = SyntheticDataset(images, labels, boxes, masks, list(manifest["class_names"]),
                          manifest["split"], int(manifest["seed"]))
    if ds.class_counts() != manifest["counts"]:
        raise DatasetFormatError("per-class counts disagree with the manifest")
    return ds


def save_dataset(ds: SyntheticDataset, path) -> None:
    atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        return decode_dataset(f.read())


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Index batches over ``range(n)``; shuffled when an rng is given. Drops a trailing batch of 1."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out
