from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from semcf import (
    DecisionHead,
    EmbeddingGrid,
    FeatureGrid,
    SearchCase,
    apply_edit,
    head_forward,
    oracle_best_edit,
    save_bundle,
)
from semcf.synthetic import make_preset

DATA_DIR = Path(__file__).parent / "data"


def random_grid(rng, h=4, w=4, d=8) -> FeatureGrid:
    return FeatureGrid(h, w, d, rng.normal(size=(h * w, d)).astype(np.float32))


def random_embedding(rng, h=4, w=4, d=6) -> EmbeddingGrid:
    return EmbeddingGrid.normalized(h, w, rng.normal(size=(h * w, d)))


def random_gap_head(rng, d=8, num_classes=4) -> DecisionHead:
    return DecisionHead(
        "gap_linear",
        (
            (
                rng.normal(size=(num_classes, d)).astype(np.float32),
                rng.normal(scale=0.1, size=num_classes).astype(np.float32),
            ),
        ),
        tuple(f"class_{c:03d}" for c in range(num_classes)),
    )


def make_random_case(rng, h=3, w=3, d=4, num_classes=3, n=2, emb_dim=6, target=None) -> SearchCase:
    """A random search case whose target differs from the predicted class."""
    query = random_grid(rng, h, w, d)
    distractors = [random_grid(rng, h, w, d) for _ in range(n)]
    head = random_gap_head(rng, d=d, num_classes=num_classes)
    probs = head_forward(head, query)
    if target is None:
        target = int(np.argsort(probs)[-2])  # runner-up class
    return SearchCase(
        query_id="q",
        query=query,
        distractor_ids=[f"d{m}" for m in range(n)],
        distractors=distractors,
        head=head,
        target_class=target,
        query_embedding=random_embedding(rng, h, w, emb_dim),
        distractor_embeddings=[random_embedding(rng, h, w, emb_dim) for _ in range(n)],
    )


def oracle_greedy_trace(case: SearchCase, config):
    """Independent greedy loop around the exhaustive oracle reference."""
    embeddings = (case.query_embedding, case.distractor_embeddings)
    working = case.query
    blocked: set[int] = set()
    picked = []
    max_edits = config.max_edits if config.max_edits is not None else case.query.num_cells
    for _ in range(max_edits):
        edit = oracle_best_edit(
            case.head, working, case.distractors, embeddings, config, case.target_class, blocked
        )
        working = apply_edit(working, case.distractors, edit.candidate)
        blocked.add(edit.candidate.query_cell)
        picked.append(edit)
        if int(np.argmax(head_forward(case.head, working))) == case.target_class:
            return picked, True
    return picked, False


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {name}: {outcome}")


@pytest.fixture(scope="session")
def mini_bundle_path() -> Path:
    path = DATA_DIR / "minibundle"
    assert (path / "manifest.json").is_file(), "checked-in mini bundle is missing"
    return path


@pytest.fixture(scope="session")
def bench_bundle_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("bench") / "bundle"
    save_bundle(make_preset("bench"), path)
    return path
