"""Binary PGM (P5) grids for eyeballing expert inputs and outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def image_grid(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Tile rows of (N, 1, H, W) batches into one (rows*H, N*W) canvas."""
    if not rows:
        raise ValueError("image_grid needs at least one row")
    n, _, h, w = rows[0].shape
    canvas = np.zeros((len(rows) * h, n * w))
    for r, batch in enumerate(rows):
        if batch.shape != rows[0].shape:
            raise ValueError(f"row {r} has shape {batch.shape}, expected {rows[0].shape}")
        for j in range(n):
            canvas[r * h : (r + 1) * h, j * w : (j + 1) * w] = batch[j, 0]
    return canvas


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    px = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file written by :func:`write_pgm`; returns values in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h = map(int, parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w) / 255.0
