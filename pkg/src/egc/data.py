"""Synthetic 2-D datasets and IDX image ingestion.

Synthetic sets are generated in their natural coordinates and mapped into
[-1, 1] by a fixed affine map (``to_unit`` / ``from_unit``), so geometry
checks can be done in the generator's own units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("two_moons", "eight_gaussians", "checkerboard", "idx_images")


class DatasetError(ValueError):
    pass


class IDXError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "two_moons"
    size: int = 10000
    noise: float = 0.1
    num_classes: int = 2
    images_path: str = ""
    labels_path: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "idx_images" and self.size <= 0:
            raise DatasetError("dataset size must be positive")


# natural-coordinate centre and half-width per kind; the map is x' = (x - c) / s
_AFFINE = {
    "two_moons": (np.array([0.5, 0.25]), 2.0),
    "eight_gaussians": (np.array([0.0, 0.0]), 2.0),
    "checkerboard": (np.array([0.0, 0.0]), 4.0),
}


def to_unit(kind: str, x: np.ndarray) -> np.ndarray:
    c, s = _AFFINE[kind]
    return (np.asarray(x) - c) / s


def from_unit(kind: str, x: np.ndarray) -> np.ndarray:
    c, s = _AFFINE[kind]
    return np.asarray(x) * s + c


def two_moons_raw(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0 = n // 2 + n % 2
    n1 = n // 2
    th0 = rng.uniform(0.0, np.pi, n0)
    th1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(th0), np.sin(th0)], axis=1)
    lower = np.stack([1.0 - np.cos(th1), 0.5 - np.sin(th1)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def octagon_means(radius: float = 1.0) -> np.ndarray:
    ang = np.arange(8) * (np.pi / 4)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def eight_gaussians_raw(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = np.arange(n) % 8
    x = octagon_means()[y] + noise * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return x[perm], y[perm].astype(np.int64)


def checkerboard_raw(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # 4x4 board on [-2, 2]^2; class = parity of the cell
    y = np.arange(n) % 2
    cells = rng.integers(0, 8, size=n)
    row = cells // 2
    col = 2 * (cells % 2) + (row + y) % 2
    x = np.stack([col - 2 + rng.uniform(0, 1, n), row - 2 + rng.uniform(0, 1, n)], axis=1)
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm].astype(np.int64)


def gen_dataset(spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Points in [-1, 1] coordinates and integer labels."""
    rng = np.random.default_rng(seed)
    if spec.kind == "two_moons":
        x, y = two_moons_raw(spec.size, spec.noise, rng)
    elif spec.kind == "eight_gaussians":
        x, y = eight_gaussians_raw(spec.size, spec.noise, rng)
    elif spec.kind == "checkerboard":
        x, y = checkerboard_raw(spec.size, spec.noise, rng)
    else:
        raise DatasetError(f"{spec.kind} is file-backed, use idx_load")
    return to_unit(spec.kind, x), y


def moons_distance(x_raw: np.ndarray) -> np.ndarray:
    """Euclidean distance from natural-coordinate points to the noiseless two-moons curve."""
    x = np.asarray(x_raw, dtype=np.float64)

    def arc(p, centre, upper):
        d = p - centre
        r = np.hypot(d[:, 0], d[:, 1])
        on_side = d[:, 1] >= 0 if upper else d[:, 1] <= 0
        radial = np.abs(r - 1.0)
        ends = centre + np.array([[1.0, 0.0], [-1.0, 0.0]])
        end_d = np.min(np.linalg.norm(p[:, None, :] - ends[None], axis=2), axis=1)
        return np.where(on_side, radial, end_d)

    return np.minimum(arc(x, np.array([0.0, 0.0]), True), arc(x, np.array([1.0, 0.5]), False))


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, magic: int) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise IDXError(f"{path}: file not found") from exc
    if len(buf) < 4:
        raise IDXError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IDXError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IDXError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - head != count:
        raise IDXError(f"{path}: expected {count} data bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def idx_load(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as (n, 1, h, w) in [-1, 1] and integer labels."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise IDXError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 127.5 - 1.0
    return x, labels.astype(np.int64)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    """Encode a uint8 array as IDX (used for fixtures and exports)."""
    arr = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def load_dataset(spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if spec.kind == "idx_images":
        return idx_load(spec.images_path, spec.labels_path)
    return gen_dataset(spec, seed)
