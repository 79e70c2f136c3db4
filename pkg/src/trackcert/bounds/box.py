from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HyperRect:
    """Axis-aligned box ``{z : lower <= z <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"box has lower > upper in dims {np.flatnonzero(lo > hi).tolist()}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_center(cls, center, half_width) -> "HyperRect":
        c = np.asarray(center, dtype=np.float64)
        r = np.broadcast_to(np.asarray(half_width, dtype=np.float64), c.shape)
        return cls(c - r, c + r)

    @classmethod
    def point(cls, x) -> "HyperRect":
        return cls(x, x)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def volume(self, dims=None) -> float:
        w = self.width if dims is None else self.width[list(dims)]
        return float(np.prod(w))

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        """Element-wise membership for a point or a batch ``(..., dim)``."""
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def subset_of(self, other: "HyperRect", tol: float = 0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def intersect(self, other: "HyperRect") -> "HyperRect | None":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        return None if np.any(lo > hi) else HyperRect(lo, hi)

    def restrict(self, dims) -> "HyperRect":
        dims = list(dims)
        return HyperRect(self.lower[dims], self.upper[dims])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def split(self, grid_counts) -> list["HyperRect"]:
        """Regular grid of cells covering the box; neighbours share faces exactly."""
        counts = np.broadcast_to(np.asarray(grid_counts, dtype=int), (self.dim,))
        if np.any(counts < 1):
            raise ValueError("grid counts must be positive")
        edges = []
        for lo, hi, c in zip(self.lower, self.upper, counts):
            e = np.linspace(lo, hi, c + 1)
            e[0], e[-1] = lo, hi
            edges.append(e)
        cells = []
        for idx in itertools.product(*(range(c) for c in counts)):
            lo = [edges[d][i] for d, i in enumerate(idx)]
            hi = [edges[d][i + 1] for d, i in enumerate(idx)]
            cells.append(HyperRect(lo, hi))
        return cells

    def to_dict(self) -> dict:
        return {"lo": self.lower.tolist(), "hi": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperRect":
        return cls(d["lo"], d["hi"])

    def __eq__(self, other):
        if not isinstance(other, HyperRect):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self) -> str:
        return f"HyperRect(lo={self.lower.tolist()}, hi={self.upper.tolist()})"


def hull(boxes) -> HyperRect:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("hull of no boxes")
    return HyperRect(np.min([b.lower for b in boxes], axis=0), np.max([b.upper for b in boxes], axis=0))


def concat_boxes(boxes) -> HyperRect:
    boxes = list(boxes)
    return HyperRect(np.concatenate([b.lower for b in boxes]), np.concatenate([b.upper for b in boxes]))
