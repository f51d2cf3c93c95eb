"""Portable anymap IO (binary P6 colour, P5 grey) via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_ppm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H, W, 3] image, got {rgb.dtype} {rgb.shape}")
    Path(path).write_bytes(ppm_bytes(rgb))


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes()


def write_pgm(path, grey: np.ndarray) -> None:
    grey = np.asarray(grey, dtype=np.uint8)
    h, w = grey.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(grey).tobytes())


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()
