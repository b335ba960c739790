from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class Dataset:
    """Inputs ``x`` of shape (n, d) with integer labels ``y`` in ``[0, n_classes)``."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"{len(y)} labels for {x.shape[0]} inputs")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ShapeError("label out of range")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)

    def domain(self, pad: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate bounding box of the inputs, widened by ``pad``."""
        return self.x.min(axis=0) - pad, self.x.max(axis=0) + pad
