"""PNG / PFM export and import."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit levels a PNG round trip can represent."""
    return from_uint8(to_uint8(image))


def save_png(path, image: np.ndarray) -> None:
    """Float image in [0, 1] (clipped here) or a 2-D mask."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Image.fromarray(image).save(path)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def save_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; grayscale for 2-D arrays, color for (H, W, 3)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise InputError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"PFM not found: {path}")
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        dims = fh.readline().split()
        scale = float(fh.readline())
        if kind not in (b"PF", b"Pf") or len(dims) != 2:
            raise InputError(f"{path}: malformed PFM header")
        w, h = int(dims[0]), int(dims[1])
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise InputError(f"{path}: PFM payload size does not match {w}x{h}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
