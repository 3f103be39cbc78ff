"""Artifact writers: CSV tables, binary PGM images, rasterised scatter plots.

Every writer goes through a temp file + rename so a crashed run never leaves
a half-written artifact behind.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    atomic_write(path, csv_bytes(header, rows))
    return Path(path)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], r[1:]


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to bytes 0..255 (values outside are clipped)."""
    v = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.rint(v).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grayscale image, got shape {arr.shape}")
    data = quantize(arr)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pgm(path, img: np.ndarray) -> Path:
    atomic_write(path, pgm_bytes(img))
    return Path(path)


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(buf[-w * h :], dtype=np.uint8).reshape(h, w)


def scatter_raster(points: np.ndarray, size: int = 64, bounds=(-1.0, 1.0)) -> np.ndarray:
    """Rasterise 2-D points onto a size x size image in [-1, 1] (lit = 1, empty = -1).

    Column follows x left to right; row follows y top to bottom, so the
    origin of a symmetric box lands on pixel (size/2, size/2).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = bounds
    img = -np.ones((size, size))
    col = np.floor((pts[:, 0] - lo) / (hi - lo) * size).astype(np.int64)
    row = np.floor((hi - pts[:, 1]) / (hi - lo) * size).astype(np.int64)
    ok = (col >= 0) & (col < size) & (row >= 0) & (row < size)
    img[row[ok], col[ok]] = 1.0
    return img


def heatmap(values: np.ndarray) -> np.ndarray:
    """Rescale a matrix to [-1, 1] for PGM output (constant input maps to 0)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = np.min(v), np.max(v)
    if hi - lo == 0:
        return np.zeros_like(v)
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def emit(kind: str, data, path, header: Sequence[str] | None = None, **kw) -> Path:
    if kind == "csv":
        if header is None:
            raise ValueError("csv output needs a header")
        return write_csv(path, header, data)
    if kind == "pgm_image":
        return write_pgm(path, data)
    if kind == "scatter_plot":
        return write_pgm(path, scatter_raster(data, **kw))
    raise ValueError(f"unknown artifact kind {kind!r}")
