"""Datasets: procedurally rendered shapes, IDX ingestion, seeded splits."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import CorruptHeaderError, CountMismatchError, TruncatedError, ValidationError, WrongMagicError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPES = ("circle", "square", "triangle", "diamond", "cross")
STROKES = ("filled", "outline", "striped")
MAX_CLASSES = len(SHAPES) * len(STROKES)
CONTRAST = (30.0, 60.0)
NOISE_STD = 1.0


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [count, channels, H, W], float32 on [0, 255]
    labels: np.ndarray  # [count], int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [count, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValidationError("images and labels differ in count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError("label outside [0, num_classes)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
            raise ValidationError("pixel values outside [0, 255]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def dataset_id(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()[:16]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _inside(shape, u, v):
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.82
    if shape == "triangle":
        return (v >= -0.75) & (v <= 0.95 - 1.7 * np.abs(u))
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    return ((np.abs(u) <= 0.32) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.32) & (np.abs(u) <= 1.0))


def _render(shape, stroke, side, rng, supersample=2):
    n = side * supersample
    coords = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx = side / 2 + rng.uniform(-3, 3)
    cy = side / 2 + rng.uniform(-3, 3)
    radius = side * rng.uniform(0.26, 0.38)
    theta = np.deg2rad(rng.uniform(-15, 15))
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _inside(shape, u, v)
    if stroke == "outline":
        mask &= ~_inside(shape, u * 1.55, v * 1.55)
    elif stroke == "striped":
        mask &= np.sin(u * 9.0) > 0
    img = mask.reshape(side, supersample, side, supersample).mean(axis=(1, 3))
    # low-contrast bright shape on a shaded background
    base = rng.uniform(70, 185)
    gy, gx = rng.uniform(-1, 1, size=2) * 25 / side
    yy, xx = np.mgrid[0:side, 0:side] - side / 2
    bg = base + gy * yy + gx * xx
    contrast = rng.uniform(*CONTRAST)
    img = bg + contrast * img + rng.normal(0, NOISE_STD, img.shape)
    return np.clip(img, 0, 255)


def synth_dataset(seed, count, num_classes=10, side=32):
    """Render ``count`` grayscale shape images with round-robin labels.

    Class ``c`` is shape ``c % 5`` drawn with stroke ``c // 5`` (filled,
    outline, striped), jittered in position, scale and rotation.
    """
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValidationError(f"num_classes must be in [2, {MAX_CLASSES}], got {num_classes}")
    if count < num_classes:
        raise ValidationError(f"count ({count}) must be >= num_classes ({num_classes})")
    if side < 16:
        raise ValidationError(f"side must be >= 16, got {side}")
    rng = np.random.default_rng(seed)
    labels = np.arange(count, dtype=np.int64) % num_classes
    images = np.empty((count, 1, side, side), dtype=np.float32)
    for i, c in enumerate(labels):
        images[i, 0] = _render(SHAPES[c % len(SHAPES)], STROKES[c // len(SHAPES)], side, rng)
    return Dataset(images, labels, num_classes)


def _read_exact(buf, offset, n, what):
    if offset + n > len(buf):
        raise TruncatedError(f"truncated IDX {what}: need {offset + n} bytes, have {len(buf)}")
    return buf[offset : offset + n]


def load_idx(images_path, labels_path, num_classes=None):
    """Parse an IDX image file (magic 0x803) and label file (magic 0x801)."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    (magic,) = struct.unpack(">I", _read_exact(ibuf, 0, 4, "image file"))
    if magic != IDX_IMAGES_MAGIC:
        raise WrongMagicError(f"wrong magic 0x{magic:08x} in image file (expected 0x{IDX_IMAGES_MAGIC:08x})")
    count, rows, cols = struct.unpack(">III", _read_exact(ibuf, 4, 12, "image file"))
    (lmagic,) = struct.unpack(">I", _read_exact(lbuf, 0, 4, "label file"))
    if lmagic != IDX_LABELS_MAGIC:
        raise WrongMagicError(f"wrong magic 0x{lmagic:08x} in label file (expected 0x{IDX_LABELS_MAGIC:08x})")
    (lcount,) = struct.unpack(">I", _read_exact(lbuf, 4, 4, "label file"))
    if lcount != count:
        raise CountMismatchError(f"image file has {count} items, label file has {lcount}")
    pix = np.frombuffer(_read_exact(ibuf, 16, count * rows * cols, "image file"), dtype=np.uint8)
    labels = np.frombuffer(_read_exact(lbuf, 8, count, "label file"), dtype=np.uint8).astype(np.int64)
    images = pix.reshape(count, 1, rows, cols).astype(np.float32)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if count else 2, 2)
    return Dataset(images, labels, num_classes)


def write_idx(dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` for single-channel uint8-valued datasets."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValidationError("IDX export needs single-channel images")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.rint(dataset.images).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def split(dataset, train_fraction, seed=0):
    """Seeded shuffle, then the first ``round(fraction * count)`` go to train."""
    if not 0 < train_fraction < 1:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ValidationError(f"split of {n} items at {train_fraction} leaves an empty half")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))


def save_dataset(dataset, path):
    return container.save(
        path,
        "dataset",
        {"images": dataset.images, "labels": dataset.labels.astype(np.float32)},
        metadata={"num_classes": dataset.num_classes, "dataset_id": dataset.dataset_id},
    )


def load_dataset(path):
    header, tensors = container.load(path)
    if header.get("kind") != "dataset":
        raise CorruptHeaderError(f"corrupt header: {path} is not a dataset file")
    labels = tensors["labels"].astype(np.int64)
    return Dataset(tensors["images"], labels, int(header["metadata"]["num_classes"]))
