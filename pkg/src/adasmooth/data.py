"""Synthetic toy datasets, IDX ingestion, and CSV export."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .nncore.dataset import Dataset

KINDS = ("two-moons", "gaussian-blobs", "concentric-circles")
_ALIASES = {"moons": "two-moons", "blobs": "gaussian-blobs", "circles": "concentric-circles"}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a balanced synthetic dataset.

    ``ambient_dim > 2`` embeds the 2-D pattern in a higher-dimensional space
    through a seeded orthonormal map and adds ``offplane_noise`` in the
    orthogonal directions. ``centers`` overrides the blob centers, which
    otherwise sit on the unit circle.
    """

    kind: str = "two-moons"
    n_per_class: int = 250
    noise: float = 0.1
    seed: int = 0
    n_classes: int = 2
    centers: tuple | None = None
    ambient_dim: int = 2
    offplane_noise: float = 0.0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.noise < 0 or self.offplane_noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if kind != "gaussian-blobs" and self.n_classes != 2:
            raise ConfigError(f"{kind} has exactly two classes")
        if self.ambient_dim < 2:
            raise ConfigError("ambient_dim must be >= 2")
        if self.centers is not None and len(self.centers) != self.n_classes:
            raise ConfigError("need one center per class")


def _moons(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    t0 = rng.uniform(0.0, np.pi, n)
    t1 = rng.uniform(0.0, np.pi, n)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    return np.concatenate([upper, lower]), np.repeat([0, 1], n)


def _circles(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    t = rng.uniform(0.0, 2 * np.pi, 2 * n)
    radius = np.repeat([1.0, 0.5], n)
    pts = np.stack([np.cos(t), np.sin(t)], axis=1) * radius[:, None]
    return pts, np.repeat([0, 1], n)


def _blob_centers(spec: SyntheticSpec) -> np.ndarray:
    if spec.centers is not None:
        return np.asarray(spec.centers, dtype=np.float64)
    angles = np.pi + 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic balanced dataset; class k occupies rows k*n .. (k+1)*n - 1."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_class
    if spec.kind == "two-moons":
        x, y = _moons(n, rng)
    elif spec.kind == "concentric-circles":
        x, y = _circles(n, rng)
    else:
        centers = _blob_centers(spec)
        y = np.repeat(np.arange(spec.n_classes), n)
        x = centers[y].copy()
    if spec.noise > 0:
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
    if spec.ambient_dim > 2:
        q, _ = np.linalg.qr(rng.standard_normal((spec.ambient_dim, spec.ambient_dim)))
        off = np.zeros((len(x), spec.ambient_dim - 2))
        if spec.offplane_noise > 0:
            off = rng.normal(0.0, spec.offplane_noise, size=off.shape)
        x = np.concatenate([x, off], axis=1) @ q.T
    return Dataset(x, y, spec.n_classes)


def split(data: Dataset, seed: int = 0, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then a ``train_fraction`` / rest split."""
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(train_fraction * len(data)))
    return data.subset(order[:cut]), data.subset(order[cut:])


def attack_domain(data: Dataset, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Valid input box for attacks on synthetic data: bounding box padded by eps."""
    return data.domain(pad=eps)


# -- IDX ------------------------------------------------------------------------------
def _read_idx(path: str | Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims, dtype=np.int64))
    body = raw[head:]
    if len(body) < need:
        raise FormatError(f"{path}: truncated payload ({len(body)} of {need} bytes)")
    return dims, body[:need]


def load_idx(images_path: str | Path, labels_path: str | Path, limit: int | None = None,
             n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], images flattened."""
    idims, ibody = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, lbody = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise FormatError(f"{idims[0]} images but {ldims[0]} labels")
    count = idims[0] if limit is None else min(int(limit), idims[0])
    pixels = idims[1] * idims[2]
    images = np.frombuffer(ibody, dtype=np.uint8).reshape(idims[0], pixels)[:count]
    labels = np.frombuffer(lbody, dtype=np.uint8)[:count].astype(np.int64)
    if count and labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} out of range for {n_classes} classes")
    return Dataset(images.astype(np.float64) / 255.0, labels, n_classes)


def save_csv(data: Dataset, path: str | Path) -> None:
    """Write ``x0..x{d-1},label`` rows for inspection."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(data.dim)] + ["label"])
        for row, label in zip(data.x, data.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
