"""Trace evaluation: keypoint projection, Near-KP / Same-KP / foreground
fractions, clustering accuracy with majority voting, distractor-class
selection, and report aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .search import EditTrace
from .semantic import ClusterAssignment

__all__ = [
    "Keypoint",
    "KeypointSet",
    "PartGrid",
    "MetricsReport",
    "project_keypoints",
    "near_kp",
    "same_kp",
    "foreground_fraction",
    "clustering_accuracy",
    "select_distractor_class",
    "select_distractor_class_by_attributes",
    "aggregate_report",
    "format_report",
]

SCOPES = ("single_edit", "all_edits")


class Keypoint(NamedTuple):
    part: int
    x: float
    y: float
    visible: bool


@dataclass(frozen=True)
class KeypointSet:
    """Pixel-space part keypoints of one image."""

    image_id: str
    image_width: int
    image_height: int
    points: tuple[Keypoint, ...]

    def __post_init__(self) -> None:
        if self.image_width < 1 or self.image_height < 1:
            raise DataError(f"keypoints for {self.image_id!r}: image dimensions must be positive")
        for pt in self.points:
            if pt.visible and not (0 <= pt.x < self.image_width and 0 <= pt.y < self.image_height):
                raise DataError(
                    f"keypoints for {self.image_id!r}: visible point ({pt.x}, {pt.y}) "
                    f"outside the {self.image_width}x{self.image_height} image"
                )


@dataclass(frozen=True)
class PartGrid:
    """Cell-level presence sets: which part ids fall inside each grid cell."""

    height: int
    width: int
    cells: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        if len(self.cells) != self.height * self.width:
            raise DataError("part grid cell count does not match its dimensions")
        object.__setattr__(self, "cells", tuple(frozenset(c) for c in self.cells))

    def parts_near(self, cell: int, dilation: int = 0) -> frozenset[int]:
        """Union of part sets within a Chebyshev radius of ``dilation`` cells."""
        if dilation == 0:
            return self.cells[cell]
        row, col = divmod(cell, self.width)
        found: set[int] = set()
        for r in range(max(0, row - dilation), min(self.height, row + dilation + 1)):
            for c in range(max(0, col - dilation), min(self.width, col + dilation + 1)):
                found |= self.cells[r * self.width + c]
        return frozenset(found)


def project_keypoints(kps: KeypointSet, h: int, w: int) -> PartGrid:
    """Drop each visible keypoint into its h x w grid cell.

    Point (x, y) lands in cell (floor(y*h/height), floor(x*w/width)),
    clamped to the grid bounds.
    """
    if h < 1 or w < 1:
        raise DataError("part grid dimensions must be positive")
    cells: list[set[int]] = [set() for _ in range(h * w)]
    for pt in kps.points:
        if not pt.visible:
            continue
        row = min(h - 1, max(0, math.floor(pt.y * h / kps.image_height)))
        col = min(w - 1, max(0, math.floor(pt.x * w / kps.image_width)))
        cells[row * w + col].add(pt.part)
    return PartGrid(h, w, tuple(frozenset(c) for c in cells))


def _scoped_edits(trace: EditTrace, scope: str):
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if not trace.edits:
        raise ValueError(f"trace {trace.query_id!r} has no edits to evaluate")
    return trace.edits[:1] if scope == "single_edit" else trace.edits


def _distractor_grid(grids: Sequence, index: int, what: str):
    if index >= len(grids):
        raise DataError(f"missing {what} for distractor image index {index}")
    return grids[index]


def near_kp(
    trace: EditTrace,
    query_parts: PartGrid,
    distractor_parts: Sequence[PartGrid],
    scope: str = "all_edits",
    dilation: int = 0,
) -> float:
    """Fraction of selected regions that contain at least one keypoint.

    The query cell and the distractor cell of an edit count as two separate
    regions, so the denominator is 2 * #edits.
    """
    hits = 0
    edits = _scoped_edits(trace, scope)
    for edit in edits:
        cand = edit.candidate
        parts = _distractor_grid(distractor_parts, cand.distractor_image, "part grid")
        hits += bool(query_parts.parts_near(cand.query_cell, dilation))
        hits += bool(parts.parts_near(cand.distractor_cell, dilation))
    return hits / (2 * len(edits))


def same_kp(
    trace: EditTrace,
    query_parts: PartGrid,
    distractor_parts: Sequence[PartGrid],
    scope: str = "all_edits",
    dilation: int = 0,
) -> float:
    """Fraction of edits whose query and distractor cells share a part."""
    hits = 0
    edits = _scoped_edits(trace, scope)
    for edit in edits:
        cand = edit.candidate
        parts = _distractor_grid(distractor_parts, cand.distractor_image, "part grid")
        query_set = query_parts.parts_near(cand.query_cell, dilation)
        distractor_set = parts.parts_near(cand.distractor_cell, dilation)
        hits += bool(query_set & distractor_set)
    return hits / len(edits)


def foreground_fraction(
    trace: EditTrace,
    query_mask: Sequence[bool],
    distractor_masks: Sequence[Sequence[bool]],
    scope: str = "all_edits",
) -> float:
    """Fraction of selected regions lying on the foreground object."""
    hits = 0
    edits = _scoped_edits(trace, scope)
    for edit in edits:
        cand = edit.candidate
        mask = _distractor_grid(distractor_masks, cand.distractor_image, "foreground mask")
        hits += bool(query_mask[cand.query_cell])
        hits += bool(mask[cand.distractor_cell])
    return hits / (2 * len(edits))


def clustering_accuracy(
    assignment: ClusterAssignment, part_grids: Mapping[str, PartGrid]
) -> float:
    """Majority-vote part purity of a cell clustering.

    Each cluster is assigned the part present in the most member cells
    (ties to the lowest part id); accuracy is the fraction of member cells
    whose part set contains the assigned part. Cells with no parts are
    excluded from both the vote and the accuracy.
    """
    votes: dict[int, dict[int, int]] = {}
    members: list[tuple[int, frozenset[int]]] = []
    for image_id, grid in part_grids.items():
        try:
            labels = assignment.labels[image_id]
        except KeyError:
            raise DataError(f"cluster assignment does not cover image {image_id!r}") from None
        if len(labels) != len(grid.cells):
            raise DataError(f"cluster labels and part grid of {image_id!r} disagree on cell count")
        for cell, parts in enumerate(grid.cells):
            if not parts:
                continue
            cluster = int(labels[cell])
            counter = votes.setdefault(cluster, {})
            for part in parts:
                counter[part] = counter.get(part, 0) + 1
            members.append((cluster, parts))
    if not members:
        raise DataError("clustering accuracy needs at least one cell with parts")
    assigned = {
        cluster: min(counter, key=lambda part: (-counter[part], part))
        for cluster, counter in votes.items()
    }
    hits = sum(assigned[cluster] in parts for cluster, parts in members)
    return hits / len(members)


def select_distractor_class(confusion: np.ndarray, query_class: int) -> int:
    """The class most often confused with ``query_class`` (ties to lowest index)."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DataError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise DataError("confusion matrix has negative entries")
    if not 0 <= query_class < cm.shape[0]:
        raise DataError(f"class {query_class} out of range for a {cm.shape[0]}-class matrix")
    row = cm[query_class].astype(np.int64).copy()
    row[query_class] = -1
    if row.max() <= 0:
        raise DataError(f"class {query_class} has no off-diagonal confusion mass")
    return int(np.argmax(row))


def select_distractor_class_by_attributes(attr_means: np.ndarray, query_class: int) -> int:
    """Nearest-neighbor class in mean attribute space (ties to lowest index)."""
    means = np.asarray(attr_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise DataError("attribute means must be a matrix with at least two classes")
    if not np.isfinite(means).all():
        raise DataError("attribute means contain non-finite values")
    if not 0 <= query_class < means.shape[0]:
        raise DataError(f"class {query_class} out of range for {means.shape[0]} classes")
    dists = np.linalg.norm(means - means[query_class], axis=1)
    dists[query_class] = np.inf
    return int(np.argmin(dists))


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate metrics over a set of traces."""

    scope: str
    case_count: int
    flipped: int
    failed: int
    near_kp: float
    same_kp: float
    mean_edits: float
    foreground: float | None
    dilation: int

    def __post_init__(self) -> None:
        for name in ("near_kp", "same_kp"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise DataError(f"{name} must lie in [0, 1], got {value}")
        if self.foreground is not None and not 0 <= self.foreground <= 1:
            raise DataError(f"foreground must lie in [0, 1], got {self.foreground}")


def aggregate_report(
    traces: Sequence[EditTrace],
    part_grids: Mapping[str, PartGrid],
    scope: str = "all_edits",
    masks: Mapping[str, Sequence[bool]] | None = None,
    dilation: int = 0,
) -> MetricsReport:
    """Mean per-trace metrics over a case set.

    ``mean_edits`` averages edit counts over flipped traces only; traces
    that never flip are counted in ``failed``. Traces with zero edits
    (already classified as the target) contribute no regions and are
    skipped by the keypoint and foreground fractions.
    """
    if not traces:
        raise ValueError("aggregate_report needs at least one trace")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    near_vals: list[float] = []
    same_vals: list[float] = []
    fg_vals: list[float] = []
    edit_counts: list[int] = []
    failed = 0
    for trace in traces:
        if trace.success:
            edit_counts.append(trace.num_edits)
        else:
            failed += 1
        if not trace.edits:
            continue
        try:
            query_parts = part_grids[trace.query_id]
            distractor_parts = [part_grids[i] for i in trace.distractor_ids]
        except KeyError as exc:
            raise DataError(f"no part grid for image {exc.args[0]!r}") from None
        near_vals.append(near_kp(trace, query_parts, distractor_parts, scope, dilation))
        same_vals.append(same_kp(trace, query_parts, distractor_parts, scope, dilation))
        if masks is not None:
            try:
                query_mask = masks[trace.query_id]
                distractor_masks = [masks[i] for i in trace.distractor_ids]
            except KeyError as exc:
                raise DataError(f"no foreground mask for image {exc.args[0]!r}") from None
            fg_vals.append(foreground_fraction(trace, query_mask, distractor_masks, scope))
    if not near_vals:
        raise DataError("no trace has edits to evaluate")
    return MetricsReport(
        scope=scope,
        case_count=len(traces),
        flipped=len(traces) - failed,
        failed=failed,
        near_kp=float(np.mean(near_vals)),
        same_kp=float(np.mean(same_vals)),
        mean_edits=float(np.mean(edit_counts)) if edit_counts else float("nan"),
        foreground=float(np.mean(fg_vals)) if masks is not None else None,
        dilation=dilation,
    )


def format_report(report: MetricsReport) -> str:
    """Deterministic text rendering of a MetricsReport."""
    lines = [
        "counterfactual evaluation report",
        f"scope: {report.scope}",
        f"cases: {report.case_count}",
        f"flipped: {report.flipped}",
        f"failed: {report.failed}",
        f"keypoint_dilation_cells: {report.dilation}",
        "region_counting: query and distractor cells scored separately (2 regions per edit)",
        "",
        "metric      value",
        f"near_kp     {report.near_kp:.6f}",
        f"same_kp     {report.same_kp:.6f}",
        f"mean_edits  {report.mean_edits:.6f}",
    ]
    if report.foreground is not None:
        lines.append(f"foreground  {report.foreground:.6f}")
    return "\n".join(lines) + "\n"
