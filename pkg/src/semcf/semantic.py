"""Semantic-consistency machinery: cell-pair likelihood tables, the top-k%
candidate prefilter, seeded K-Means over embedding cells, and the
same-cluster hard constraint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .grids import EmbeddingGrid, pairwise_dot, stable_softmax
from .heads import Candidate

__all__ = [
    "SimilarityTable",
    "similarity_table",
    "prefilter_topk",
    "KMeansResult",
    "kmeans_cells",
    "ClusterAssignment",
    "cluster_embeddings",
    "hard_constraint_candidates",
]

NORMALIZATIONS = ("pooled", "per_image")


@dataclass(frozen=True, eq=False)
class SimilarityTable:
    """Likelihood that query cell i semantically matches distractor cell j.

    ``likelihood`` is (hw, n*hw); with pooled normalization each row sums
    to 1, with per_image normalization each hw-wide row block sums to 1.
    """

    likelihood: np.ndarray
    temperature: float
    normalization: str
    num_images: int

    @property
    def num_query_cells(self) -> int:
        return self.likelihood.shape[0]

    @property
    def cells_per_image(self) -> int:
        return self.likelihood.shape[1] // self.num_images

    def lookup(self, cand: Candidate) -> float:
        hw = self.cells_per_image
        return float(self.likelihood[cand.query_cell, cand.distractor_image * hw + cand.distractor_cell])


def similarity_table(
    query: EmbeddingGrid,
    distractors: Sequence[EmbeddingGrid],
    temperature: float,
    normalization: str = "pooled",
) -> SimilarityTable:
    """Temperature-softmax of all query/distractor cell dot products.

    Computed once per case; the greedy loop reuses it across edits.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    dots = pairwise_dot(query, distractors)
    hw = query.num_cells
    n = len(distractors)
    if normalization == "pooled":
        like = stable_softmax(dots, temperature)
    else:
        blocks = stable_softmax(dots.reshape(hw, n, hw), temperature)
        like = blocks.reshape(hw, n * hw)
    return SimilarityTable(like, float(temperature), normalization, n)


def prefilter_topk(table: SimilarityTable, k_fraction: float) -> list[Candidate]:
    """The ceil(k_fraction * hw * n * hw) highest-likelihood candidate pairs.

    Selection is global across all pairs; ties are broken lexicographically
    by (query_cell, distractor_image, distractor_cell). k_fraction = 1
    keeps every pair.
    """
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    flat = table.likelihood.reshape(-1)
    total = flat.shape[0]
    count = min(total, math.ceil(k_fraction * total))
    # Stable sort on the row-major flattening: equal likelihoods keep
    # lexicographic candidate order.
    order = np.argsort(-flat, kind="stable")[:count]
    hw = table.cells_per_image
    per_query = table.num_images * hw
    return [
        Candidate(int(idx // per_query), int(idx % per_query // hw), int(idx % hw))
        for idx in order
    ]


@dataclass(frozen=True, eq=False)
class KMeansResult:
    """Outcome of one deterministic K-Means run over a point matrix."""

    k: int
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    inertia_history: tuple[float, ...] = field(default=())


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[c] = points[idx]
        closest = np.minimum(closest, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans_cells(
    cells,
    k: int,
    seed: int,
    max_iter: int = 300,
    rel_tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, deterministic for a fixed seed.

    Stops when the relative inertia decrease falls below ``rel_tol`` or
    after ``max_iter`` assignment passes. Clusters that empty out are
    re-seeded with the point currently farthest from its own center.
    """
    points = np.asarray(cells, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"kmeans_cells: expected a 2-d point matrix, got ndim={points.ndim}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise DataError(f"kmeans_cells: k={k} must lie in [1, {n}] for {n} cells")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, k, rng)

    sq_norms = (points**2).sum(axis=1)
    labels = np.zeros(n, dtype=np.intp)
    inertia = math.inf
    history: list[float] = []
    prev = None
    for _ in range(max_iter):
        d2 = sq_norms[:, None] - 2.0 * (points @ centers.T) + (centers**2).sum(axis=1)[None, :]
        labels = d2.argmin(axis=1)
        residual = points - centers[labels]
        own_dist = (residual**2).sum(axis=1)
        inertia = float(own_dist.sum())
        history.append(inertia)
        if prev is not None and (prev - inertia) <= rel_tol * prev:
            break
        prev = inertia

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            farthest = np.argsort(-own_dist, kind="stable")
            for slot, cluster in enumerate(empty):
                centers[cluster] = points[farthest[slot]]
    return KMeansResult(k, centers, labels.astype(np.int32), inertia, seed, tuple(history))


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Per-image cell cluster labels from one K-Means run over embedding cells."""

    k: int
    centers: np.ndarray
    labels: dict[str, np.ndarray]
    seed: int
    inertia: float


def cluster_embeddings(
    embeddings: Mapping[str, EmbeddingGrid], k: int, seed: int
) -> ClusterAssignment:
    """Cluster the cells of several embedding grids jointly.

    Images are stacked in the mapping's iteration order; pass an ordered
    mapping for reproducible results.
    """
    if not embeddings:
        raise DataError("cluster_embeddings: no embedding grids supplied")
    ids = list(embeddings)
    stacked = np.concatenate([embeddings[i].data for i in ids], axis=0)
    result = kmeans_cells(stacked, k, seed)
    labels: dict[str, np.ndarray] = {}
    offset = 0
    for image_id in ids:
        hw = embeddings[image_id].num_cells
        labels[image_id] = result.labels[offset : offset + hw]
        offset += hw
    return ClusterAssignment(k, result.centers, labels, seed, result.inertia)


def hard_constraint_candidates(
    assignment: ClusterAssignment,
    query_image: str,
    distractor_images: Sequence[str],
) -> list[Candidate]:
    """All candidate pairs whose query and distractor cells share a cluster."""
    try:
        query_labels = assignment.labels[query_image]
    except KeyError:
        raise DataError(f"cluster assignment does not cover image {query_image!r}") from None
    out: list[Candidate] = []
    for m, image_id in enumerate(distractor_images):
        try:
            d_labels = assignment.labels[image_id]
        except KeyError:
            raise DataError(f"cluster assignment does not cover image {image_id!r}") from None
        rows, cols = np.nonzero(query_labels[:, None] == d_labels[None, :])
        out.extend(Candidate(int(i), m, int(j)) for i, j in zip(rows, cols))
    out.sort()
    return out
