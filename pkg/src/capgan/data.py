"""Dataset loading, normalization, imbalance construction and oversampling.

Every function here is pure: batches are treated as immutable and each
operation returns a new :class:`ImageBatch`.  Pixel values live in ``[0, 1]``
throughout because the reconstruction cross-entropy needs Bernoulli-style
targets.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, FormatError
from .storage import save_npz

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".pgm"}


@dataclass(frozen=True, eq=False)
class ImageBatch:
    """Labeled images, ``pixels`` shaped ``[N, H, W, C]`` with values in [0, 1]."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        labels = np.asarray(self.labels, dtype=np.int64)
        if pixels.ndim != 4:
            raise ValueError(f"pixels must be [N, H, W, C], got shape {pixels.shape}")
        if pixels.shape[0] != labels.shape[0]:
            raise ConsistencyError(
                f"{pixels.shape[0]} images but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def take(self, index) -> "ImageBatch":
        index = np.asarray(index, dtype=np.int64)
        return ImageBatch(self.pixels[index], self.labels[index], self.num_classes)

    def of_class(self, class_id: int) -> "ImageBatch":
        return self.take(np.flatnonzero(self.labels == class_id))


@dataclass
class DatasetManifest:
    name: str
    resolution: tuple[int, int]
    channels: int
    num_classes: int
    per_class_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.per_class_counts) != self.num_classes:
            raise ConsistencyError("per_class_counts length must equal num_classes")
        if any(c < 0 for c in self.per_class_counts):
            raise ValueError("class counts must be non-negative")

    @classmethod
    def from_batch(cls, name: str, batch: ImageBatch) -> "DatasetManifest":
        n, h, w, c = batch.pixels.shape
        return cls(name, (h, w), c, batch.num_classes,
                   [int(v) for v in class_histogram(batch)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["name"], tuple(d["resolution"]), int(d["channels"]),
                   int(d["num_classes"]), [int(v) for v in d["per_class_counts"]])


@dataclass(frozen=True)
class ImbalancePlan:
    majority_class: int = 0
    rate: float = 10.0
    seed: int = 0

    def minority_target(self, majority_count: int) -> int:
        if self.rate < 1:
            raise ValueError(f"imbalance rate must be >= 1, got {self.rate}")
        target = math.floor(majority_count / self.rate)
        if target < 1:
            raise ValueError(
                f"rate {self.rate} leaves no minority samples "
                f"(majority count {majority_count})")
        return target


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic number 0x{magic:08x} "
            f"(expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    expected = int(np.prod(dims)) if dims else 0
    if body.size != expected:
        raise FormatError(
            f"{path}: header declares {expected} bytes of data, found {body.size}")
    return body.reshape(dims)


def load_idx(image_path, label_path, num_classes: int = 10) -> ImageBatch:
    """Read an IDX image/label file pair (MNIST, Fashion-MNIST).

    ``.gz`` files are decompressed transparently.
    """
    images = _parse_idx(image_path, IDX_IMAGES_MAGIC)
    labels = _parse_idx(label_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{image_path} holds {images.shape[0]} images but "
            f"{label_path} holds {labels.shape[0]} labels")
    pixels = (images.astype(np.float32) / 255.0)[..., None]
    return ImageBatch(pixels, labels.astype(np.int64), num_classes)


def load_cifar10(batch_file_paths: Sequence) -> ImageBatch:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar bytes)."""
    if isinstance(batch_file_paths, (str, Path)):
        batch_file_paths = [batch_file_paths]
    pixels, labels = [], []
    for path in batch_file_paths:
        raw = np.frombuffer(_read_bytes(path), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
            raise FormatError(
                f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        y = records[:, 0].astype(np.int64)
        if y.max() > 9:
            raise ValueError(f"{path}: label byte {int(y.max())} exceeds 9")
        x = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        pixels.append(x.astype(np.float32) / 255.0)
        labels.append(y)
    return ImageBatch(np.concatenate(pixels), np.concatenate(labels), 10)


def load_image_dir(root_path, channels: int = 3, size: tuple[int, int] | None = None) -> ImageBatch:
    """Load a class-per-subdirectory image folder.

    Class ids follow lexicographic order of the subdirectory names.  Every
    image is converted to ``channels`` (1 or 3).  Images must share one size
    unless ``size`` is given, in which case each is bilinearly resized.
    """
    from PIL import Image, UnidentifiedImageError

    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    root = Path(root_path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FormatError(f"{root}: no class subdirectories")
    mode = "L" if channels == 1 else "RGB"
    images, labels = [], []
    for class_id, class_dir in enumerate(class_dirs):
        count = 0
        for f in sorted(class_dir.iterdir()):
            if not f.is_file() or f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert(mode)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s: %s", f, exc)
                continue
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr)
            labels.append(class_id)
            count += 1
        if count == 0:
            log.warning("class directory %s holds no images", class_dir)
    if size is not None:
        images = [resize_images(im[None], *size)[0] for im in images]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ConsistencyError(
            f"{root}: images have differing sizes {sorted(shapes)}; pass size=(H, W)")
    if images:
        pixels = np.stack(images)
    else:
        h, w = size if size is not None else (1, 1)
        pixels = np.zeros((0, h, w, channels), dtype=np.float32)
    return ImageBatch(pixels, np.asarray(labels, dtype=np.int64), len(class_dirs))


def make_synthetic(num_classes: int = 10, per_class: int = 100, size: int = 28,
                   seed: int = 0) -> ImageBatch:
    """Procedural stand-in for a digit dataset.

    Each class is a fixed glyph of three anti-aliased strokes; samples jitter
    the glyph position, stroke width and intensity and add pixel noise.  The
    glyph shapes depend only on the class id, never on ``seed``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = 0.2 * size, 0.8 * size
    pixels = np.empty((num_classes * per_class, size, size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for k in range(num_classes):
        glyph = np.random.default_rng(10_007 + k).uniform(lo, hi, size=(3, 2, 2))
        for i in range(per_class):
            shift = rng.uniform(-0.07 * size, 0.07 * size, size=2)
            width = rng.uniform(0.04, 0.07) * size
            ink = rng.uniform(0.75, 1.0)
            dist = np.full((size, size), np.inf)
            for (x0, y0), (x1, y1) in glyph + shift:
                dx, dy = x1 - x0, y1 - y0
                t = ((xx - x0) * dx + (yy - y0) * dy) / max(dx * dx + dy * dy, 1e-9)
                t = np.clip(t, 0.0, 1.0)
                d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
                dist = np.minimum(dist, d)
            img = ink * np.clip(width - dist + 0.5, 0.0, 1.0)
            img += rng.normal(0.0, 0.03, size=img.shape)
            pixels[k * per_class + i, :, :, 0] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(labels.size)
    return ImageBatch(pixels[order], labels[order], num_classes)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers, edge clamped
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_images(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError("target size must be at least 1x1")
    n, h, w, c = pixels.shape
    if (h, w) == (height, width):
        return pixels.copy()
    x = pixels.astype(np.float64)
    r0, r1, rw = _axis_weights(h, height)
    a, b = x[:, r0], x[:, r1]
    # lerp form keeps constant regions exact
    x = a + rw[None, :, None, None] * (b - a)
    c0, c1, cw = _axis_weights(w, width)
    a, b = x[:, :, c0], x[:, :, c1]
    x = a + cw[None, None, :, None] * (b - a)
    return np.clip(x, 0.0, 1.0).astype(pixels.dtype)


def resize(batch: ImageBatch, height: int, width: int) -> ImageBatch:
    """Bilinear resampling to ``[N, height, width, C]``."""
    return ImageBatch(resize_images(batch.pixels, height, width), batch.labels.copy(),
                      batch.num_classes)


def class_histogram(batch: ImageBatch) -> np.ndarray:
    return np.bincount(batch.labels, minlength=batch.num_classes).astype(np.int64)


def impose_imbalance(batch: ImageBatch, plan: ImbalancePlan) -> ImageBatch:
    """Keep the majority class whole, subsample every other class to
    ``floor(majority_count / rate)`` without replacement, then shuffle."""
    counts = class_histogram(batch)
    if not 0 <= plan.majority_class < batch.num_classes:
        raise ValueError(f"majority class {plan.majority_class} out of range")
    target = plan.minority_target(int(counts[plan.majority_class]))
    rng = np.random.default_rng(plan.seed)
    keep = []
    for c in range(batch.num_classes):
        idx = np.flatnonzero(batch.labels == c)
        if c == plan.majority_class:
            keep.append(idx)
            continue
        if idx.size < target:
            raise ValueError(
                f"class {c} has {idx.size} samples, fewer than the target {target}")
        keep.append(np.sort(rng.choice(idx, size=target, replace=False)))
    keep = np.concatenate(keep)
    return batch.take(keep[rng.permutation(keep.size)])


def random_oversample(batch: ImageBatch, seed: int) -> ImageBatch:
    """Resample every class with replacement up to the largest class count.

    Each original sample is kept once; only the shortfall is drawn at
    random, so no original is ever lost.
    """
    counts = class_histogram(batch)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {empty} have no samples to oversample")
    target = int(counts.max())
    rng = np.random.default_rng(seed)
    parts = []
    for c in range(batch.num_classes):
        idx = np.flatnonzero(batch.labels == c)
        extra = rng.choice(idx, size=target - idx.size, replace=True)
        parts.append(np.concatenate([idx, extra]))
    keep = np.concatenate(parts)
    return batch.take(keep[rng.permutation(keep.size)])


def balanced_subsample(batch: ImageBatch, seed: int) -> ImageBatch:
    """Downsample every class without replacement to the smallest class count."""
    counts = class_histogram(batch)
    target = int(counts.min())
    if target == 0:
        raise ValueError("cannot balance a batch with an empty class")
    rng = np.random.default_rng(seed)
    parts = [np.sort(rng.choice(np.flatnonzero(batch.labels == c), size=target, replace=False))
             for c in range(batch.num_classes)]
    keep = np.concatenate(parts)
    return batch.take(keep[rng.permutation(keep.size)])


def stratified_split(batch: ImageBatch, test_fraction: float = 0.2, seed: int = 0):
    """Seeded per-class train/test split for datasets without a native test set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(batch.num_classes):
        idx = rng.permutation(np.flatnonzero(batch.labels == c))
        n_test = int(round(idx.size * test_fraction))
        if idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return (batch.take(np.sort(np.concatenate(train_idx))),
            batch.take(np.sort(np.concatenate(test_idx))))


# ---------------------------------------------------------------------------
# Persistence: flat archive of named arrays + JSON sidecar manifest
# ---------------------------------------------------------------------------

def save_batch(path, batch: ImageBatch, name: str = "dataset") -> DatasetManifest:
    path = Path(path)
    save_npz(path, {"pixels": batch.pixels, "labels": batch.labels})
    manifest = DatasetManifest.from_batch(name, batch)
    path.with_suffix(".json").write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def load_batch(path) -> tuple[ImageBatch, DatasetManifest]:
    path = Path(path)
    try:
        with np.load(path) as z:
            pixels, labels = z["pixels"], z["labels"]
        manifest = DatasetManifest.from_dict(json.loads(path.with_suffix(".json").read_text()))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable batch archive ({exc})") from exc
    batch = ImageBatch(pixels, labels, manifest.num_classes)
    if class_histogram(batch).tolist() != manifest.per_class_counts:
        raise ConsistencyError(f"{path}: class counts disagree with sidecar manifest")
    return batch, manifest
