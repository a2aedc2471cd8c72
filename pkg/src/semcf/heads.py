"""Decision heads over feature grids, plus fast scoring of single-cell edits.

Two head architectures are supported:

* ``gap_linear``: global average pooling followed by one linear layer.
* ``flatten_mlp``: the cell matrix flattened cell-major to a vector of
  length h*w*d, pushed through linear layers with ReLU between them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .grids import FeatureGrid, stable_softmax

__all__ = [
    "DecisionHead",
    "Candidate",
    "head_forward",
    "head_logits",
    "apply_edit",
    "score_candidates",
]

HEAD_KINDS = ("gap_linear", "flatten_mlp")

# Scoring batch sizes; bound peak memory, never observable in results.
_GAP_BATCH = 8192
_MLP_BATCH = 256


class Candidate(NamedTuple):
    """One prospective edit: query cell i receives distractor cell j of image m.

    Tuple ordering doubles as the lexicographic tie-break order.
    """

    query_cell: int
    distractor_image: int
    distractor_cell: int


@dataclass(frozen=True, eq=False)
class DecisionHead:
    """Weights of the decision network g, mapping a feature grid to class logits."""

    kind: str
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.kind not in HEAD_KINDS:
            raise DataError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if not self.layers:
            raise DataError("decision head needs at least one layer")
        if self.kind == "gap_linear" and len(self.layers) != 1:
            raise DataError("gap_linear head must have exactly one linear layer")
        cleaned = []
        in_dim = None
        for idx, (weight, bias) in enumerate(self.layers):
            w = np.asarray(weight, dtype=np.float32)
            b = np.asarray(bias, dtype=np.float32)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise DataError(f"head layer {idx}: weight/bias shapes {w.shape}/{b.shape} do not pair")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DataError(f"head layer {idx}: non-finite weights")
            if in_dim is not None and w.shape[1] != in_dim:
                raise DataError(
                    f"head layer {idx}: expects input dim {w.shape[1]}, previous layer emits {in_dim}"
                )
            in_dim = w.shape[0]
            cleaned.append((w, b))
        if in_dim != len(self.class_names):
            raise DataError(
                f"final layer emits {in_dim} logits but head lists {len(self.class_names)} classes"
            )
        object.__setattr__(self, "layers", tuple(cleaned))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        """Channel count (gap_linear) or flattened h*w*d length (flatten_mlp)."""
        return self.layers[0][0].shape[1]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DecisionHead)
            and self.kind == other.kind
            and self.class_names == other.class_names
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(w1, w2) and np.array_equal(b1, b2)
                for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
            )
        )


def _check_grid_for_head(head: DecisionHead, grid: FeatureGrid) -> None:
    if head.kind == "gap_linear":
        if head.input_dim != grid.channels:
            raise DataError(
                f"gap_linear head expects {head.input_dim} channels, grid has {grid.channels}"
            )
    else:
        flat = grid.num_cells * grid.channels
        if head.input_dim != flat:
            raise DataError(
                f"flatten_mlp head expects input length {head.input_dim}, grid flattens to {flat}"
            )


def head_logits(head: DecisionHead, grid: FeatureGrid) -> np.ndarray:
    """Class logits for a grid, computed in float64."""
    _check_grid_for_head(head, grid)
    if head.kind == "gap_linear":
        weight, bias = head.layers[0]
        pooled = grid.data.mean(axis=0, dtype=np.float64)
        return weight.astype(np.float64) @ pooled + bias.astype(np.float64)
    x = grid.data.reshape(-1).astype(np.float64)
    for idx, (weight, bias) in enumerate(head.layers):
        x = weight.astype(np.float64) @ x + bias.astype(np.float64)
        if idx < len(head.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def head_forward(head: DecisionHead, grid: FeatureGrid) -> np.ndarray:
    """Class probabilities for a grid: logits through softmax at temperature 1."""
    return stable_softmax(head_logits(head, grid), 1.0)


def _check_candidate(cand: Candidate, num_cells: int, num_distractors: int) -> None:
    if not 0 <= cand.query_cell < num_cells:
        raise DataError(f"candidate query cell {cand.query_cell} out of range [0, {num_cells})")
    if not 0 <= cand.distractor_image < num_distractors:
        raise DataError(
            f"candidate distractor image {cand.distractor_image} out of range [0, {num_distractors})"
        )
    if not 0 <= cand.distractor_cell < num_cells:
        raise DataError(
            f"candidate distractor cell {cand.distractor_cell} out of range [0, {num_cells})"
        )


def _check_same_shape(base: FeatureGrid, distractors: Sequence[FeatureGrid]) -> None:
    if len(distractors) == 0:
        raise DataError("need at least one distractor grid")
    for m, grid in enumerate(distractors):
        if not base.same_shape(grid):
            raise DataError(
                f"distractor grid {m} is {grid.height}x{grid.width}x{grid.channels}, "
                f"query is {base.height}x{base.width}x{base.channels}"
            )


def apply_edit(
    base: FeatureGrid, distractors: Sequence[FeatureGrid], cand: Candidate
) -> FeatureGrid:
    """Copy of ``base`` with one cell row replaced from the chosen distractor."""
    _check_same_shape(base, distractors)
    _check_candidate(cand, base.num_cells, len(distractors))
    data = base.data.copy()
    data[cand.query_cell] = distractors[cand.distractor_image].data[cand.distractor_cell]
    return FeatureGrid(base.height, base.width, base.channels, data)


def score_candidates(
    head: DecisionHead,
    base: FeatureGrid,
    distractors: Sequence[FeatureGrid],
    cands: Sequence[Candidate],
    target_class: int,
) -> np.ndarray:
    """Predicted target-class probability after each candidate edit.

    Entry j equals head_forward(apply_edit(base, distractors, cands[j]))
    at ``target_class``. For gap_linear heads the edits are scored
    incrementally from the base pooled vector and base logits, so each
    candidate costs O(|C| * d) instead of a full forward pass.
    """
    _check_grid_for_head(head, base)
    _check_same_shape(base, distractors)
    if not 0 <= target_class < head.num_classes:
        raise DataError(f"target class {target_class} out of range [0, {head.num_classes})")
    if len(cands) == 0:
        return np.zeros(0, dtype=np.float64)
    num_cells = base.num_cells
    for cand in cands:
        _check_candidate(cand, num_cells, len(distractors))
    q_idx = np.fromiter((c.query_cell for c in cands), dtype=np.intp, count=len(cands))
    flat_idx = np.fromiter(
        (c.distractor_image * num_cells + c.distractor_cell for c in cands),
        dtype=np.intp,
        count=len(cands),
    )
    stacked = np.concatenate([d.data for d in distractors], axis=0)

    if head.kind == "gap_linear":
        weight, bias = head.layers[0]
        w64 = weight.astype(np.float64)
        base_logits = w64 @ base.data.mean(axis=0, dtype=np.float64) + bias.astype(np.float64)
        out = np.empty(len(cands), dtype=np.float64)
        for start in range(0, len(cands), _GAP_BATCH):
            stop = min(start + _GAP_BATCH, len(cands))
            diff = (
                stacked[flat_idx[start:stop]].astype(np.float64)
                - base.data[q_idx[start:stop]].astype(np.float64)
            ) / num_cells
            logits = base_logits[None, :] + diff @ w64.T
            out[start:stop] = stable_softmax(logits, 1.0)[:, target_class]
        return out

    base_flat = base.data.reshape(-1).astype(np.float64)
    channels = base.channels
    weights64 = [(w.astype(np.float64), b.astype(np.float64)) for w, b in head.layers]
    out = np.empty(len(cands), dtype=np.float64)
    for start in range(0, len(cands), _MLP_BATCH):
        stop = min(start + _MLP_BATCH, len(cands))
        x = np.tile(base_flat, (stop - start, 1))
        for row, k in enumerate(range(start, stop)):
            lo = q_idx[k] * channels
            x[row, lo : lo + channels] = stacked[flat_idx[k]]
        for idx, (w64, b64) in enumerate(weights64):
            x = x @ w64.T + b64
            if idx < len(weights64) - 1:
                np.maximum(x, 0.0, out=x)
        out[start:stop] = stable_softmax(x, 1.0)[:, target_class]
    return out
