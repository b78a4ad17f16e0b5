"""Datasets: IDX and image-folder ingestion, class-conditional synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTH_KINDS = ("blobs", "stripes", "texture")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise DataError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if len(images) == 0:
        raise DataError("empty dataset")
    imgs = images.astype(np.float64)[:, None] / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    if int(labels.max()) >= k:
        raise DataError(f"label {int(labels.max())} outside {k} classes")
    return Dataset(imgs, labels, k)


def write_idx(images_path, labels_path, images, labels) -> None:
    """Write uint8-quantized images (n, H, W) or (n, 1, H, W) and labels as IDX."""
    imgs = np.asarray(images)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    if imgs.dtype != np.uint8:
        imgs = np.round(np.clip(imgs, 0, 1) * 255).astype(np.uint8)
    n, h, w = imgs.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + imgs.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(lab)) + lab.tobytes())


def load_image_folder(root, num_classes: int | None = None) -> Dataset:
    """Read ``root/<class>/*.pgm|*.ppm``; classes are the subdirectories in sorted order."""
    from .images import read_image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in (".pgm", ".ppm"):
                continue
            try:
                images.append(read_image(f))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{f}: {exc}") from exc
            labels.append(label)
    if not images:
        raise DataError(f"{root}: no PGM/PPM images found")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"{root}: images have differing shapes {sorted(shapes)}")
    k = num_classes if num_classes is not None else len(class_dirs)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), k)


def _grid(h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    return yy, xx


def _blobs(rng, label, classes, c, h, w):
    yy, xx = _grid(h, w)
    base = np.random.default_rng(1000 + label)
    centers = base.uniform(0.2, 0.8, size=(2, 2))
    colors = base.uniform(0.3, 1.0, size=(2, c))
    img = np.full((c, h, w), 0.1)
    for (cy, cx), col in zip(centers + rng.normal(0, 0.05, size=(2, 2)), colors):
        r = 0.18 + 0.04 * rng.standard_normal()
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += col[:, None, None] * bump[None]
    return img


def _stripes(rng, label, classes, c, h, w):
    yy, xx = _grid(h, w)
    theta = np.pi * label / max(classes, 1)
    freq = 3.0 + 2.0 * (label % 3)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase))
    tint = np.random.default_rng(2000 + label).uniform(0.5, 1.0, size=c)
    return 0.05 + 0.9 * tint[:, None, None] * wave[None]


def _texture(rng, label, classes, c, h, w):
    noise = rng.uniform(0, 1, size=(c, h, w))
    # separable 3-tap smoothing keeps some structure without killing TV
    k = np.array([0.25, 0.5, 0.25])
    sm = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 1, noise)
    sm = np.apply_along_axis(lambda v: np.convolve(v, k, mode="same"), 2, sm)
    return 0.5 * sm + 0.5 * _blobs(rng, label, classes, c, h, w)


_GENERATORS = {"blobs": _blobs, "stripes": _stripes, "texture": _texture}


def synth_dataset(kind: str, n: int, shape=(1, 16, 16), classes: int = 10, seed: int = 0) -> Dataset:
    """Class-conditional images in [0, 1]; stripes have high TV, blobs low TV."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < classes:
        raise ValueError("need at least one sample per class")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    gen = _GENERATORS[kind]
    images = np.stack([gen(rng, int(y), classes, c, h, w) for y in labels])
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), classes)


def image_tv(images) -> np.ndarray:
    """Per-image anisotropic total variation of an (n, C, H, W) stack."""
    images = np.asarray(images, dtype=np.float64)
    dh = np.abs(np.diff(images, axis=-1)).sum(axis=(1, 2, 3))
    dv = np.abs(np.diff(images, axis=-2)).sum(axis=(1, 2, 3))
    return dh + dv


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
