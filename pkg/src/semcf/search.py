"""Greedy counterfactual search.

Each iteration scores every surviving candidate edit under

    log p_target(edited grid) + weight * log likelihood(cell pair)

commits the best one, and stops once the head's argmax flips to the
target class or the edit budget is exhausted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, NoCandidatesError
from .grids import EmbeddingGrid, FeatureGrid
from .heads import Candidate, DecisionHead, apply_edit, head_forward, score_candidates
from .semantic import (
    NORMALIZATIONS,
    ClusterAssignment,
    SimilarityTable,
    hard_constraint_candidates,
    prefilter_topk,
    similarity_table,
)

__all__ = [
    "SearchConfig",
    "SearchCase",
    "SearchStats",
    "Edit",
    "EditTrace",
    "single_best_edit",
    "find_counterfactual",
    "oracle_best_edit",
]

CONSTRAINT_MODES = ("soft", "hard", "none")

# Probabilities are floored before logs so the combined objective stays
# finite when the softmax underflows; the floor never changes an argmax
# between representable probabilities.
PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of one search run.

    ``max_edits`` of None means one edit per grid cell, the point where the
    query is fully distractor content and further edits are undefined
    without reuse.
    """

    semantic_weight: float = 0.4
    temperature: float = 0.1
    prefilter_fraction: float = 0.10
    max_edits: int | None = None
    constraint_mode: str = "soft"
    normalization: str = "pooled"
    reuse_cells: bool = False

    def __post_init__(self) -> None:
        if self.semantic_weight < 0:
            raise ValueError(f"semantic_weight must be >= 0, got {self.semantic_weight}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.prefilter_fraction <= 1:
            raise ValueError(
                f"prefilter_fraction must lie in (0, 1], got {self.prefilter_fraction}"
            )
        if self.max_edits is not None and self.max_edits < 1:
            raise ValueError(f"max_edits must be >= 1, got {self.max_edits}")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(
                f"constraint_mode must be one of {CONSTRAINT_MODES}, got {self.constraint_mode!r}"
            )
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )


@dataclass
class SearchStats:
    """Operation counters for cost accounting.

    ``head_evals`` counts every decision-head application (initial
    prediction, candidate scoring, post-commit checks); ``candidate_evals``
    counts only the per-candidate scorings, i.e. the per-edit cost of the
    classification term. ``dot_products`` counts embedding cell-pair dot
    products.
    """

    head_evals: int = 0
    candidate_evals: int = 0
    dot_products: int = 0
    candidate_evals_per_edit: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class Edit:
    """One committed (or proposed) cell replacement with its score parts.

    ``semantic_likelihood`` is None when the run never built a similarity
    table (constraint_mode none or hard, or a zero semantic weight with no
    prefiltering).
    """

    candidate: Candidate
    class_prob_after: float
    semantic_likelihood: float | None
    combined_score: float


@dataclass(eq=False)
class EditTrace:
    """Result of one counterfactual search."""

    query_id: str
    query_class: int
    target_class: int
    distractor_ids: list[str]
    edits: list[Edit]
    success: bool
    final_probs: np.ndarray
    stats: SearchStats

    @property
    def num_edits(self) -> int:
        return len(self.edits)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EditTrace)
            and self.query_id == other.query_id
            and self.query_class == other.query_class
            and self.target_class == other.target_class
            and self.distractor_ids == other.distractor_ids
            and self.edits == other.edits
            and self.success == other.success
            and np.array_equal(self.final_probs, other.final_probs)
            and self.stats == other.stats
        )


@dataclass(frozen=True)
class SearchCase:
    """All per-case inputs of a search: grids, embeddings, head, target."""

    query_id: str
    query: FeatureGrid
    distractor_ids: list[str]
    distractors: list[FeatureGrid]
    head: DecisionHead
    target_class: int
    query_embedding: EmbeddingGrid | None = None
    distractor_embeddings: list[EmbeddingGrid] | None = None
    clusters: ClusterAssignment | None = None

    def __post_init__(self) -> None:
        if len(self.distractor_ids) != len(self.distractors):
            raise DataError("distractor id list and grid list lengths differ")
        if not self.distractors:
            raise DataError("search case needs at least one distractor")
        for m, grid in enumerate(self.distractors):
            if not self.query.same_shape(grid):
                raise DataError(f"distractor grid {m} shape differs from the query grid")
        if not 0 <= self.target_class < self.head.num_classes:
            raise DataError(
                f"target class {self.target_class} out of range [0, {self.head.num_classes})"
            )
        embeddings = [self.query_embedding] if self.query_embedding is not None else []
        embeddings += list(self.distractor_embeddings or [])
        for emb in embeddings:
            if not emb.matches_grid(self.query):
                raise DataError("embedding grid dims differ from the feature grid dims")
        if self.distractor_embeddings is not None and len(self.distractor_embeddings) != len(
            self.distractors
        ):
            raise DataError("distractor embedding list length differs from grid list")


def _effective_weight(config: SearchConfig) -> float:
    # Hard and unconstrained modes drop the semantic term from the objective.
    return config.semantic_weight if config.constraint_mode == "soft" else 0.0


def _needs_table(config: SearchConfig) -> bool:
    return config.constraint_mode == "soft" and (
        config.semantic_weight > 0 or config.prefilter_fraction < 1
    )


def _combined_score(prob: float, likelihood: float | None, weight: float) -> float:
    score = math.log(max(prob, PROB_FLOOR))
    if weight > 0 and likelihood is not None:
        score += weight * math.log(max(likelihood, PROB_FLOOR))
    return score


def _all_candidates(num_cells: int, num_distractors: int) -> list[Candidate]:
    return [
        Candidate(i, m, j)
        for i in range(num_cells)
        for m in range(num_distractors)
        for j in range(num_cells)
    ]


def single_best_edit(
    head: DecisionHead,
    query_grid: FeatureGrid,
    distractor_grids: Sequence[FeatureGrid],
    table: SimilarityTable | None,
    config: SearchConfig,
    target_class: int,
    blocked_cells: set[int] = frozenset(),
    candidates: Sequence[Candidate] | None = None,
    stats: SearchStats | None = None,
) -> Edit:
    """The argmax edit of the combined objective over surviving candidates.

    ``candidates`` overrides the default pool (all pairs, or the top-k%
    prefilter in soft mode); hard mode callers must pass the cluster-matched
    pool explicitly. Ties are broken lexicographically by candidate.
    """
    weight = _effective_weight(config)
    if candidates is None:
        if config.constraint_mode == "hard":
            raise ValueError("hard mode needs an explicit cluster-matched candidate pool")
        if config.constraint_mode == "soft" and config.prefilter_fraction < 1:
            if table is None:
                raise ValueError("prefiltering needs a similarity table")
            candidates = prefilter_topk(table, config.prefilter_fraction)
        else:
            candidates = _all_candidates(query_grid.num_cells, len(distractor_grids))
    if not config.reuse_cells and blocked_cells:
        candidates = [c for c in candidates if c.query_cell not in blocked_cells]
    if not candidates:
        raise NoCandidatesError("no candidates survive the filters")
    if weight > 0 and table is None:
        raise ValueError("a similarity table is required when the semantic weight is nonzero")

    probs = score_candidates(head, query_grid, distractor_grids, candidates, target_class)
    if stats is not None:
        stats.candidate_evals += len(candidates)
        stats.head_evals += len(candidates)
        stats.candidate_evals_per_edit.append(len(candidates))

    likelihoods: np.ndarray | None = None
    if table is not None:
        hw = table.cells_per_image
        rows = np.fromiter((c.query_cell for c in candidates), dtype=np.intp, count=len(candidates))
        cols = np.fromiter(
            (c.distractor_image * hw + c.distractor_cell for c in candidates),
            dtype=np.intp,
            count=len(candidates),
        )
        likelihoods = table.likelihood[rows, cols]
    combined = np.log(np.maximum(probs, PROB_FLOOR))
    if weight > 0 and likelihoods is not None:
        combined = combined + weight * np.log(np.maximum(likelihoods, PROB_FLOOR))
    ties = np.flatnonzero(combined == combined.max())
    best_idx = int(min(ties, key=lambda i: candidates[i]))
    best = candidates[best_idx]
    return Edit(
        candidate=best,
        class_prob_after=float(probs[best_idx]),
        semantic_likelihood=None if likelihoods is None else float(likelihoods[best_idx]),
        combined_score=float(combined[best_idx]),
    )


def find_counterfactual(case: SearchCase, config: SearchConfig) -> EditTrace:
    """Run the greedy loop until the head predicts the target class.

    The similarity table and the candidate pool are built once per case;
    each committed edit blocks its query cell (unless ``reuse_cells``) and
    the trace records the scores recomputed on the committed grid. The
    search also stops, unsuccessfully, if every remaining candidate is
    blocked before the decision flips.
    """
    head = case.head
    probs = head_forward(head, case.query)
    stats = SearchStats(head_evals=1)
    query_class = int(np.argmax(probs))
    weight = _effective_weight(config)

    if query_class == case.target_class:
        return EditTrace(
            query_id=case.query_id,
            query_class=query_class,
            target_class=case.target_class,
            distractor_ids=list(case.distractor_ids),
            edits=[],
            success=True,
            final_probs=probs,
            stats=stats,
        )

    table: SimilarityTable | None = None
    if _needs_table(config):
        if case.query_embedding is None or case.distractor_embeddings is None:
            raise DataError("soft-constraint search needs query and distractor embeddings")
        table = similarity_table(
            case.query_embedding,
            case.distractor_embeddings,
            config.temperature,
            config.normalization,
        )
        stats.dot_products += case.query.num_cells**2 * len(case.distractors)

    if config.constraint_mode == "hard":
        if case.clusters is None:
            raise DataError("hard-constraint search needs a cluster assignment")
        pool = hard_constraint_candidates(case.clusters, case.query_id, case.distractor_ids)
    elif config.constraint_mode == "soft" and config.prefilter_fraction < 1:
        assert table is not None
        pool = prefilter_topk(table, config.prefilter_fraction)
    else:
        pool = _all_candidates(case.query.num_cells, len(case.distractors))

    max_edits = config.max_edits if config.max_edits is not None else case.query.num_cells
    working = case.query
    blocked: set[int] = set()
    edits: list[Edit] = []
    success = False
    for _ in range(max_edits):
        surviving = (
            pool
            if config.reuse_cells
            else [c for c in pool if c.query_cell not in blocked]
        )
        if not surviving:
            break
        proposal = single_best_edit(
            head,
            working,
            case.distractors,
            table,
            config,
            case.target_class,
            blocked_cells=frozenset(),
            candidates=surviving,
            stats=stats,
        )
        working = apply_edit(working, case.distractors, proposal.candidate)
        if not config.reuse_cells:
            blocked.add(proposal.candidate.query_cell)
        probs = head_forward(head, working)
        stats.head_evals += 1
        # Re-derive the score parts from the committed grid so the trace is
        # exact regardless of the incremental scoring path.
        prob_after = float(probs[case.target_class])
        edits.append(
            Edit(
                candidate=proposal.candidate,
                class_prob_after=prob_after,
                semantic_likelihood=proposal.semantic_likelihood,
                combined_score=_combined_score(prob_after, proposal.semantic_likelihood, weight),
            )
        )
        if int(np.argmax(probs)) == case.target_class:
            success = True
            break

    return EditTrace(
        query_id=case.query_id,
        query_class=query_class,
        target_class=case.target_class,
        distractor_ids=list(case.distractor_ids),
        edits=edits,
        success=success,
        final_probs=probs,
        stats=stats,
    )


def oracle_best_edit(
    head: DecisionHead,
    query_grid: FeatureGrid,
    distractor_grids: Sequence[FeatureGrid],
    embeddings: tuple[EmbeddingGrid, Sequence[EmbeddingGrid]] | None,
    config: SearchConfig,
    target_class: int,
    blocked_cells: set[int] = frozenset(),
) -> Edit:
    """Brute-force reference for single_best_edit with no prefiltering.

    Evaluates every unblocked candidate with a full edit plus forward pass,
    applying the same combined objective and the same lexicographic
    tie-break. Intended for small instances.
    """
    weight = _effective_weight(config)
    table: SimilarityTable | None = None
    if weight > 0:
        if embeddings is None:
            raise ValueError("a nonzero semantic weight needs embeddings")
        query_emb, distractor_embs = embeddings
        table = similarity_table(
            query_emb, distractor_embs, config.temperature, config.normalization
        )
    best: Edit | None = None
    best_key = None
    for i in range(query_grid.num_cells):
        if not config.reuse_cells and i in blocked_cells:
            continue
        for m in range(len(distractor_grids)):
            for j in range(query_grid.num_cells):
                cand = Candidate(i, m, j)
                edited = apply_edit(query_grid, distractor_grids, cand)
                prob = float(head_forward(head, edited)[target_class])
                likelihood = table.lookup(cand) if table is not None else None
                score = _combined_score(prob, likelihood, weight)
                key = (-score, cand)
                if best_key is None or key < best_key:
                    best_key = key
                    best = Edit(cand, prob, likelihood, score)
    if best is None:
        raise NoCandidatesError("no candidates survive the filters")
    return best
