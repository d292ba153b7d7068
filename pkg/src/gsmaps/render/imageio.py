"""RGBA PNG output and the GSIM raw float image format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

GSIM_MAGIC = b"GSIM"
_GSIM_HEADER = struct.Struct("<4sIII")


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def to_rgba8(color: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    rgb = np.round(linear_to_srgb(color) * 255.0)
    a = np.round(np.clip(alpha, 0.0, 1.0) * 255.0)
    return np.concatenate([rgb, a[..., None]], -1).astype(np.uint8)


def save_png(path, color: np.ndarray, alpha: np.ndarray) -> None:
    """8-bit RGBA: color encoded as sRGB after clamping, alpha stored linearly."""
    # fixed encoder settings keep the bytes stable across runs
    Image.fromarray(to_rgba8(color, alpha), "RGBA").save(Path(path), format="PNG", optimize=False, compress_level=6)


def load_png(path):
    """Linear color (H, W, 3) and alpha (H, W) in [0, 1]."""
    img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    return srgb_to_linear(img[..., :3]), img[..., 3]


def save_gsim(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    H, W, C = image.shape
    with open(path, "wb") as f:
        f.write(_GSIM_HEADER.pack(GSIM_MAGIC, H, W, C))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_gsim(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _GSIM_HEADER.size:
        raise ValueError(f"{path}: truncated GSIM header")
    magic, H, W, C = _GSIM_HEADER.unpack_from(raw)
    if magic != GSIM_MAGIC:
        raise ValueError(f"{path}: not a GSIM file")
    n = H * W * C
    if len(raw) != _GSIM_HEADER.size + 4 * n:
        raise ValueError(f"{path}: expected {n} floats, file size disagrees")
    return np.frombuffer(raw, dtype="<f4", offset=_GSIM_HEADER.size).reshape(H, W, C).astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else float(10.0 * np.log10(peak * peak / mse))
