"""8-bit PGM/PPM dumps for visual inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(stem, img) -> Path:
    """Write a (C, H, W) image as binary PGM (C=1) or PPM (C=3); returns the path."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    channels, h, w = img.shape
    if channels == 1:
        path, magic, payload = Path(f"{stem}.pgm"), b"P5", to_uint8(img[0])
    elif channels == 3:
        path, magic, payload = Path(f"{stem}.ppm"), b"P6", to_uint8(np.transpose(img, (1, 2, 0)))
    else:
        raise ValueError(f"cannot dump an image with {channels} channels")
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(payload).tobytes())
    return path


def read_image(path) -> np.ndarray:
    """Inverse of :func:`write_image` (values in [0, 1], shape (C, H, W))."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    # header: four whitespace-separated tokens, then exactly one whitespace byte before the pixels
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated image header")
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit images are supported")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos + 1)
    expected = h * w * (3 if magic == b"P6" else 1)
    if data.size < expected:
        raise ValueError(f"expected {expected} pixel bytes, found {data.size}")
    if magic == b"P5":
        return data[: h * w].reshape(1, h, w) / 255.0
    if magic == b"P6":
        return np.transpose(data[: h * w * 3].reshape(h, w, 3), (2, 0, 1)) / 255.0
    raise ValueError(f"unsupported image magic {magic!r}")
