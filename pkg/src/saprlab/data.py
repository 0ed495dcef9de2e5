"""Datasets: procedurally rendered shape classes and an IDX (MNIST-style) reader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, S, S] float64 in [0, 255]
    labels: np.ndarray  # [M] int64
    split: np.ndarray  # [M] of "train" / "test"
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split)
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.split):
            raise ConfigError("images, labels and split tags must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, tag: str) -> "Dataset":
        keep = self.split == tag
        return Dataset(self.images[keep], self.labels[keep], self.split[keep], self.num_classes)

    @property
    def train(self):
        return self.subset("train")

    @property
    def test(self):
        return self.subset("test")


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def _grid(S):
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    return yy, xx


def _shape_mask(kind, S, rng):
    yy, xx = _grid(S)
    cy = S / 2 + rng.uniform(-0.15, 0.15) * S
    cx = S / 2 + rng.uniform(-0.15, 0.15) * S
    scale = rng.uniform(0.75, 1.15)
    r = np.hypot(yy - cy, xx - cx)
    # periodic textures fill a disk window, so their evidence is local like the other shapes
    window = r < 0.28 * S * scale
    if kind == "hbars":
        period = S / rng.uniform(3.5, 5.0)
        return ((np.mod(yy - cy, period) < period / 2) & window).astype(float)
    if kind == "vbars":
        period = S / rng.uniform(3.5, 5.0)
        return ((np.mod(xx - cx, period) < period / 2) & window).astype(float)
    if kind == "cross":
        arm, half = 0.10 * S * scale, 0.38 * S * scale
        horiz = (np.abs(yy - cy) < arm) & (np.abs(xx - cx) < half)
        vert = (np.abs(xx - cx) < arm) & (np.abs(yy - cy) < half)
        return (horiz | vert).astype(float)
    if kind == "disk":
        return (r < 0.28 * S * scale).astype(float)
    if kind == "ring":
        rad = 0.30 * S * scale
        return (np.abs(r - rad) < 0.07 * S).astype(float)
    if kind == "checker":
        cell = S / rng.choice([4, 5, 6])
        return (((np.floor((yy - cy) / cell) + np.floor((xx - cx) / cell)) % 2 == 1) & window).astype(float)
    if kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        proj = (yy - S / 2) * np.sin(angle) + (xx - S / 2) * np.cos(angle)
        return np.clip(proj / S + 0.5, 0.0, 1.0)
    if kind == "diagonal":
        period = S / rng.uniform(3.5, 5.0)
        sign = rng.choice([-1.0, 1.0])
        return ((np.mod(yy + sign * xx, period) < period / 2) & window).astype(float)
    if kind == "square":
        half, width = 0.30 * S * scale, 0.07 * S
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return (np.abs(d - half) < width).astype(float)
    if kind == "triangle":
        h = 0.6 * S * scale
        top = cy - h / 2
        rel = (yy - top) / h
        return ((rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * h * 0.6)).astype(float)
    if kind == "xcross":
        arm, half = 0.09 * S, 0.35 * S * scale
        d1 = np.abs((yy - cy) - (xx - cx)) / np.sqrt(2)
        d2 = np.abs((yy - cy) + (xx - cx)) / np.sqrt(2)
        inside = r < half * np.sqrt(2)
        return (((d1 < arm) | (d2 < arm)) & inside).astype(float)
    if kind == "ell":
        arm, half = 0.10 * S * scale, 0.32 * S * scale
        flip_y, flip_x = rng.choice([-1.0, 1.0], size=2)
        u, v = flip_y * (yy - cy), flip_x * (xx - cx)
        upright = (np.abs(v + half) < arm) & (np.abs(u) < half)
        foot = (np.abs(u - half) < arm) & (v > -half - arm) & (v < half)
        return (upright | foot).astype(float)
    if kind == "dots":
        step = S / rng.choice([3, 4])
        fy = np.mod(yy - cy, step) - step / 2
        fx = np.mod(xx - cx, step) - step / 2
        return ((np.hypot(fy, fx) < step * 0.22) & window).astype(float)
    raise ConfigError(f"unknown shape kind {kind!r}")


SHAPE_KINDS = ("hbars", "vbars", "cross", "disk", "ring", "triangle", "gradient", "diagonal",
               "square", "checker", "xcross", "dots", "ell")


DEFAULT_CONTRAST = (120.0, 220.0)
DEFAULT_NOISE = 2.0


def render_shape(kind, S, channels, rng, noise=DEFAULT_NOISE, contrast=DEFAULT_CONTRAST):
    """One image of ``kind``: a random background colour with the shape offset by
    a random contrast in either polarity, plus Gaussian pixel noise."""
    mask = _shape_mask(kind, S, rng)
    c = rng.uniform(*contrast)
    bg = rng.uniform(0, 255 - c, size=channels)
    fg = bg + c
    if rng.random() < 0.5:
        fg, bg = bg, fg
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255)


def generate_synthetic_dataset(num_classes=8, per_class=128, image_size=32, seed=0, channels=3,
                               test_fraction=0.25, noise=DEFAULT_NOISE, contrast=DEFAULT_CONTRAST) -> Dataset:
    """Balanced dataset of rendered shape classes with integer pixel values.

    Class ``k`` is ``SHAPE_KINDS[k]``; position, scale, colours and pixel
    noise are jittered per image. A ``test_fraction`` of every class is tagged
    ``"test"``.
    """
    if num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if num_classes > len(SHAPE_KINDS):
        raise ConfigError(f"at most {len(SHAPE_KINDS)} shape classes are available")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    if not 0 <= contrast[0] <= contrast[1] <= 255:
        raise ConfigError(f"contrast range must satisfy 0 <= low <= high <= 255, got {contrast}")
    rng = np.random.default_rng(seed)
    images = np.empty((num_classes * per_class, channels, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    n_test = int(round(per_class * test_fraction))
    split = np.tile(np.array(["train"] * (per_class - n_test) + ["test"] * n_test), num_classes)
    for i, k in enumerate(labels):
        images[i] = render_shape(SHAPE_KINDS[k], image_size, channels, rng, noise, contrast)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], split[order], num_classes)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_idx(path, expected_magic, ndim):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for IDX magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``size x size``."""
    h, w = images.shape[-2:]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return images[..., rows[:, None], cols[None, :]]


def load_idx_dataset(images_path, labels_path, image_size=32, channels=3, num_classes=None,
                     test_fraction=0.25, seed=0) -> Dataset:
    """Read an IDX image/label pair (uint8), rescale and replicate channels."""
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if len(imgs) != len(labels):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels")
    imgs = resize_nearest(imgs.astype(np.float64), image_size)
    imgs = np.repeat(imgs[:, None], channels, axis=1)
    k = int(labels.max()) + 1 if num_classes is None and len(labels) else (num_classes or 0)
    rng = np.random.default_rng(seed)
    split = np.array(["train"] * len(labels), dtype="<U5")
    n_test = int(round(len(labels) * test_fraction))
    split[rng.permutation(len(labels))[:n_test]] = "test"
    return Dataset(imgs, labels, split, max(k, 1))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (used by tests and fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())
