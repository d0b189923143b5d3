"""On-disk formats: raw latent binary, PNG rasters, grayscale heatmaps.

Raw latent layout: 16-byte header (12-byte magic + u32 version), then three
little-endian u32 dims (height, width, channels), then float32 values in
row-major (row, col, channel) order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .grids import Latent, validate_latent

LATENT_MAGIC = b"MOSAICLATENT"
LATENT_VERSION = 1


def save_latent(path: str | Path, latent: Latent) -> None:
    validate_latent(latent)
    h, w, c = latent.shape
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<I", LATENT_VERSION))
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(latent, dtype="<f4").tobytes())


def load_latent(path: str | Path) -> Latent:
    with open(path, "rb") as f:
        magic = f.read(12)
        if magic != LATENT_MAGIC:
            raise ValueError(f"{path}: not a latent file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != LATENT_VERSION:
            raise ValueError(f"{path}: unsupported latent version {version}")
        h, w, c = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: payload has {data.size} floats, expected {h * w * c}")
    return data.reshape(h, w, c).astype(np.float32)


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG as (H, W, 3) or (H, W, 4) uint8."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "RGBA"):
            img = img.convert("RGBA" if "A" in img.mode or "transparency" in img.info else "RGB")
        return np.asarray(img, dtype=np.uint8).copy()


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    """Write (H, W), (H, W, 3) or (H, W, 4) uint8 pixels as PNG."""
    if pixels.dtype != np.uint8:
        raise ValueError("write_png expects uint8 pixels")
    mode = {2: "L", 3: "RGB", 4: "RGBA"}[pixels.ndim if pixels.ndim == 2 else pixels.shape[2]]
    Image.fromarray(pixels, mode=mode).save(path)


def latent_to_pixels(latent: Latent, value_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Map latent values back to uint8 pixels, clipping to the range."""
    lo, hi = value_range
    scaled = (np.clip(latent, lo, hi) - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def write_latent_png(path: str | Path, latent: Latent,
                     value_range: tuple[float, float] = (-1.0, 1.0)) -> None:
    validate_latent(latent)
    if latent.shape[2] != 3:
        raise ValueError("PNG export needs a 3-channel latent")
    write_png(path, latent_to_pixels(latent, value_range))


def write_heatmap_png(path: str | Path, scores: np.ndarray) -> None:
    """Min-max normalize a 2-D map into an 8-bit grayscale PNG."""
    if scores.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    arr = np.asarray(scores, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    write_png(path, np.round(arr * 255.0).astype(np.uint8))
