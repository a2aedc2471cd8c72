"""Attribute-level explanations.

A bank of linear part-attribute classifiers shares the pooled feature
space with a gap_linear decision head. The target-class weight row is
decomposed over the attribute rows mapped to the parts detected at the
edited cells, and attributes are ranked by how much their importance
changes between the original and the edited grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Iterable, Sequence

import numpy as np

from .errors import DataError
from .grids import FeatureGrid, gap
from .heads import Candidate, DecisionHead

__all__ = [
    "AttributeBank",
    "PartProbGrid",
    "AttributeImportance",
    "denoise_attributes",
    "detect_parts_topk",
    "ibd_decompose",
    "attribute_importance",
    "discriminative_attributes",
    "top1_discriminative_accuracy",
]


@dataclass(frozen=True, eq=False)
class AttributeBank:
    """Linear attribute classifiers: one weight row and bias per attribute."""

    weights: np.ndarray
    biases: np.ndarray
    names: tuple[str, ...]
    parts: tuple[int, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.biases, dtype=np.float32)
        if w.ndim != 2:
            raise DataError("attribute weights must be a (T, d) matrix")
        if b.shape != (w.shape[0],):
            raise DataError("attribute biases must align with the weight rows")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DataError("attribute bank has non-finite values")
        if len(self.names) != w.shape[0] or len(self.parts) != w.shape[0]:
            raise DataError("attribute names/parts must align with the weight rows")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "parts", tuple(int(p) for p in self.parts))

    @property
    def num_attributes(self) -> int:
        return self.weights.shape[0]

    def attributes_for_parts(self, parts: Collection[int]) -> list[int]:
        wanted = set(parts)
        return [t for t, part in enumerate(self.parts) if part in wanted]


@dataclass(frozen=True, eq=False)
class PartProbGrid:
    """Per-cell part probabilities from an external multi-label detector."""

    height: int
    width: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.probs, dtype=np.float32)
        if arr.shape[0] != self.height * self.width or arr.ndim != 2:
            raise DataError(
                f"part probability grid: expected ({self.height * self.width}, parts), got {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise DataError("part probability grid has non-finite values")
        object.__setattr__(self, "probs", arr)

    @property
    def num_parts(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class AttributeImportance:
    """Importance of one attribute before and after the edit."""

    attribute: int
    s: float
    s_prime: float
    delta: float


def denoise_attributes(raw: np.ndarray) -> np.ndarray:
    """Binarize per-class attribute frequencies: present iff strictly above 1/2."""
    arr = np.asarray(raw, dtype=np.float64)
    if ((arr < 0) | (arr > 1)).any():
        raise DataError("attribute frequencies must lie in [0, 1]")
    return (arr > 0.5).astype(np.int8)


def detect_parts_topk(grid: PartProbGrid, cell: int, k: int = 3) -> list[int]:
    """The k most probable part ids at a cell, ties to the lowest part id."""
    if not 0 <= cell < grid.height * grid.width:
        raise DataError(f"cell {cell} out of range for a {grid.height}x{grid.width} grid")
    if not 1 <= k <= grid.num_parts:
        raise DataError(f"k={k} out of range for {grid.num_parts} parts")
    order = np.argsort(-grid.probs[cell].astype(np.float64), kind="stable")
    return [int(p) for p in order[:k]]


def ibd_decompose(
    class_weight: np.ndarray,
    bank: AttributeBank,
    allowed: Iterable[int],
    max_terms: int | None = None,
) -> tuple[np.ndarray, float]:
    """Greedy positive-projection decomposition of a class weight vector.

    Repeatedly picks the allowed attribute whose unit direction has the
    largest positive projection onto the residual, accumulates its
    coefficient, and subtracts the projection. Returns the coefficient
    vector over all bank attributes (zeros outside ``allowed``) and the
    final residual norm.
    """
    allowed = sorted(set(int(t) for t in allowed))
    if not allowed:
        raise DataError("ibd_decompose needs a non-empty allowed attribute set")
    for t in allowed:
        if not 0 <= t < bank.num_attributes:
            raise DataError(f"attribute id {t} out of range")
    weight = np.asarray(class_weight, dtype=np.float64)
    if weight.shape != (bank.weights.shape[1],):
        raise DataError(
            f"class weight length {weight.shape} does not match attribute dim {bank.weights.shape[1]}"
        )
    rows = bank.weights[allowed].astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if (norms < 1e-12).any():
        bad = [allowed[i] for i in np.flatnonzero(norms < 1e-12)]
        raise DataError(f"attributes {bad} have zero-norm classifier rows")
    units = rows / norms[:, None]
    if max_terms is None:
        max_terms = len(allowed)
    if max_terms > len(allowed):
        raise DataError(f"max_terms={max_terms} exceeds the {len(allowed)} allowed attributes")

    coeffs = np.zeros(bank.num_attributes, dtype=np.float64)
    residual = weight.copy()
    for _ in range(max_terms):
        projections = units @ residual
        pick = int(np.argmax(projections))
        if projections[pick] <= 0:
            break
        coeffs[allowed[pick]] += projections[pick] / norms[pick]
        residual = residual - projections[pick] * units[pick]
    return coeffs, float(np.linalg.norm(residual))


def attribute_importance(
    query: FeatureGrid,
    edited: FeatureGrid,
    head: DecisionHead,
    bank: AttributeBank,
    target_class: int,
    best_edit: Candidate,
    query_parts: PartProbGrid,
    distractor_parts: PartProbGrid,
    detected_parts: int = 3,
) -> list[AttributeImportance]:
    """Rank attributes by importance change under a single cell edit.

    The allowed attributes map to the union of the top detected parts at
    the query cell and at the distractor cell. Importance of attribute t
    on a grid is coeff_t * (attribute response on the pooled feature);
    results are sorted by decreasing change, ties to the lowest id.
    """
    if head.kind != "gap_linear":
        raise DataError("attribute importance requires a gap_linear head")
    if not query.same_shape(edited):
        raise DataError("query and edited grids differ in shape")
    if not 0 <= target_class < head.num_classes:
        raise DataError(f"target class {target_class} out of range")
    other = np.delete(query.data, best_edit.query_cell, axis=0)
    other_edited = np.delete(edited.data, best_edit.query_cell, axis=0)
    if not np.array_equal(other, other_edited):
        raise DataError("edited grid differs from the query outside the edited cell")

    parts = set(
        detect_parts_topk(
            query_parts, best_edit.query_cell, min(detected_parts, query_parts.num_parts)
        )
    )
    parts |= set(
        detect_parts_topk(
            distractor_parts,
            best_edit.distractor_cell,
            min(detected_parts, distractor_parts.num_parts),
        )
    )
    allowed = bank.attributes_for_parts(parts)
    if not allowed:
        raise DataError(f"no attributes are mapped to the detected parts {sorted(parts)}")

    weight_row = head.layers[0][0][target_class]
    coeffs, _ = ibd_decompose(weight_row, bank, allowed)

    pooled = gap(query).astype(np.float64)
    pooled_edited = gap(edited).astype(np.float64)
    rows = bank.weights.astype(np.float64)
    biases = bank.biases.astype(np.float64)
    out = []
    for t in allowed:
        s = coeffs[t] * (rows[t] @ pooled + biases[t])
        s_prime = coeffs[t] * (rows[t] @ pooled_edited + biases[t])
        out.append(AttributeImportance(t, float(s), float(s_prime), float(s_prime - s)))
    out.sort(key=lambda item: (-item.delta, item.attribute))
    return out


def discriminative_attributes(
    denoised: np.ndarray, class_a: int, class_b: int
) -> frozenset[int]:
    """Attributes present in exactly one of the two classes."""
    binary = np.asarray(denoised)
    if binary.ndim != 2:
        raise DataError("denoised attribute matrix must be 2-d")
    for c in (class_a, class_b):
        if not 0 <= c < binary.shape[0]:
            raise DataError(f"class {c} out of range")
    return frozenset(int(t) for t in np.flatnonzero(binary[class_a] != binary[class_b]))


def top1_discriminative_accuracy(
    top1_attrs: Sequence[int],
    ground_truth_sets: Sequence[Collection[int]],
) -> tuple[float, int]:
    """How often the top-1 attribute is discriminative of its class pair.

    Cases with an empty ground-truth set are skipped; returns the hit
    fraction over evaluated cases and the number skipped.
    """
    if len(top1_attrs) != len(ground_truth_sets):
        raise DataError("top-1 attributes and ground-truth sets must align")
    hits = 0
    evaluated = 0
    skipped = 0
    for attr, truth in zip(top1_attrs, ground_truth_sets):
        if not truth:
            skipped += 1
            continue
        evaluated += 1
        hits += attr in truth
    if evaluated == 0:
        raise DataError("every case has an empty ground-truth attribute set")
    return hits / evaluated, skipped
