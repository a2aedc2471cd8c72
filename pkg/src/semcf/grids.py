"""Dense grid primitives shared by every other module.

Feature and embedding maps are stored cell-major: cell i of an h x w grid
(with i = row * w + col) is row i of an (h*w, channels) float32 matrix.
Values are stored in single precision; reductions accumulate in double
precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "FeatureGrid",
    "EmbeddingGrid",
    "gap",
    "stable_softmax",
    "pairwise_dot",
]

UNIT_NORM_TOL = 1e-4


def _grid_matrix(data, num_cells: int, channels: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.shape != (num_cells, channels):
        raise DataError(f"{what}: expected shape ({num_cells}, {channels}), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{what}: non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """An h x w spatial feature map held as an (h*w, channels) cell matrix."""

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise DataError("feature grid dimensions must be positive")
        matrix = _grid_matrix(
            self.data, self.height * self.width, self.channels, "feature grid"
        )
        object.__setattr__(self, "data", matrix)

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def same_shape(self, other: "FeatureGrid") -> bool:
        return (self.height, self.width, self.channels) == (
            other.height,
            other.width,
            other.channels,
        )

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, FeatureGrid)
            and self.same_shape(other)
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    """Auxiliary embedding map; every cell row has unit Euclidean norm."""

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise DataError("embedding grid dimensions must be positive")
        matrix = _grid_matrix(
            self.data, self.height * self.width, self.channels, "embedding grid"
        )
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise DataError(
                "embedding grid rows are not unit-normalized; "
                "use EmbeddingGrid.normalized() to renormalize raw rows"
            )
        object.__setattr__(self, "data", matrix)

    @classmethod
    def normalized(cls, height: int, width: int, data) -> "EmbeddingGrid":
        """Build a grid from raw rows, renormalizing them to unit length.

        Rows that are already unit-length within tolerance pass through
        bit-exactly, so reloading a stored grid is stable.
        """
        arr32 = np.asarray(data, dtype=np.float32)
        if arr32.ndim != 2:
            raise DataError(f"embedding grid: expected a 2-d cell matrix, got ndim={arr32.ndim}")
        arr = arr32.astype(np.float64)
        norms = np.linalg.norm(arr, axis=1)
        if np.abs(norms - 1.0).max() <= UNIT_NORM_TOL:
            return cls(height, width, arr32.shape[1], arr32)
        zero = norms < 1e-12
        if zero.any():
            raise DataError(
                f"embedding grid: cell rows {np.flatnonzero(zero).tolist()} have zero norm"
            )
        return cls(height, width, arr32.shape[1], (arr / norms[:, None]).astype(np.float32))

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def matches_grid(self, grid: FeatureGrid) -> bool:
        return (self.height, self.width) == (grid.height, grid.width)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EmbeddingGrid)
            and (self.height, self.width, self.channels)
            == (other.height, other.width, other.channels)
            and np.array_equal(self.data, other.data)
        )


def gap(grid: FeatureGrid) -> np.ndarray:
    """Global average pool: per-channel mean over all cells.

    Accumulates in float64, returns float32.
    """
    return grid.data.mean(axis=0, dtype=np.float64).astype(np.float32)


def stable_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax of logits / temperature with max-subtraction, in float64.

    Accepts a vector or a matrix (softmax over the last axis).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = np.asarray(logits, dtype=np.float64) / temperature
    if not np.isfinite(x).all():
        raise ValueError("softmax input contains non-finite logits")
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def pairwise_dot(query: EmbeddingGrid, distractors: Sequence[EmbeddingGrid]) -> np.ndarray:
    """All query-cell x distractor-cell dot products as an (hw, n*hw) float64 matrix.

    Distractor cells are indexed image-major then cell-major: column
    m * hw + j is cell j of distractor image m.
    """
    if len(distractors) == 0:
        raise DataError("pairwise_dot: need at least one distractor grid")
    for m, other in enumerate(distractors):
        if other.channels != query.channels:
            raise DataError(
                f"pairwise_dot: distractor {m} has {other.channels} channels, "
                f"query has {query.channels}"
            )
        if (other.height, other.width) != (query.height, query.width):
            raise DataError(
                f"pairwise_dot: distractor {m} grid is "
                f"{other.height}x{other.width}, query is {query.height}x{query.width}"
            )
    stacked = np.concatenate([d.data for d in distractors], axis=0).astype(np.float64)
    return query.data.astype(np.float64) @ stacked.T
