import json
import logging
from pathlib import Path

import numpy as np
import pytest

from semcf import (
    Candidate,
    DataError,
    Edit,
    EditTrace,
    SearchConfig,
    SearchStats,
    head_forward,
    load_bundle,
    load_trace,
    save_bundle,
    save_trace,
)
from semcf.bundle import TraceDocument, save_assignment_debug, save_table_debug
from semcf.synthetic import make_bundle, make_preset

def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def sample_trace(success=True, with_edits=True):
    edits = (
        [
            Edit(Candidate(0, 0, 1), 0.71, 0.25, -0.897),
            Edit(Candidate(3, 1, 2), 0.82, None, -0.198),
            Edit(Candidate(5, 0, 0), 0.93, 0.5, -0.349),
        ]
        if with_edits
        else []
    )
    return EditTrace(
        query_id="img_000_00",
        query_class=0,
        target_class=1,
        distractor_ids=["img_001_00", "img_001_01"],
        edits=edits,
        success=success,
        final_probs=np.array([0.05, 0.9, 0.03, 0.02]),
        stats=SearchStats(head_evals=10, candidate_evals=7, dot_products=64, candidate_evals_per_edit=[4, 2, 1]),
    )


class TestBundleRoundTrip:
    def test_minibundle_loads_and_head_runs(self, mini_bundle_path):
        bundle = load_bundle(mini_bundle_path)
        assert bundle.height == bundle.width == 4
        assert len(bundle.class_names) == 4
        assert len(bundle.images) == 8
        record = next(iter(bundle.images.values()))
        probs = head_forward(bundle.head, record.features)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert bundle.attribute_bank is not None
        assert bundle.confusion_matrix is not None

    def test_checked_in_minibundle_matches_generator(self, mini_bundle_path, tmp_path):
        save_bundle(make_preset("mini"), tmp_path / "regen")
        assert tree_bytes(tmp_path / "regen") == tree_bytes(mini_bundle_path)

    def test_write_read_write_is_bit_identical(self, tmp_path):
        bundle = make_bundle(seed=123, height=3, width=5, channels=6, embedding_channels=4)
        save_bundle(bundle, tmp_path / "a")
        loaded = load_bundle(tmp_path / "a")
        for image_id, rec in bundle.images.items():
            assert loaded.images[image_id].features == rec.features
            assert np.array_equal(loaded.images[image_id].embedding.data, rec.embedding.data)
        assert loaded.head == bundle.head
        save_bundle(loaded, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_part_aliases_applied_to_keypoints(self, tmp_path):
        bundle = make_bundle(seed=5, num_parts=4)
        bundle.part_aliases = {3: 1}
        save_bundle(bundle, tmp_path / "aliased")
        loaded = load_bundle(tmp_path / "aliased")
        for rec in loaded.images.values():
            assert all(pt.part != 3 for pt in rec.keypoints.points)

    def test_metadata_passthrough(self, tmp_path):
        bundle = make_bundle(seed=6)
        bundle.metadata = {"source": "unit-test", "nested": {"k": 1}}
        save_bundle(bundle, tmp_path / "meta")
        loaded = load_bundle(tmp_path / "meta")
        assert loaded.metadata == bundle.metadata
        save_bundle(loaded, tmp_path / "meta2")
        assert tree_bytes(tmp_path / "meta") == tree_bytes(tmp_path / "meta2")


class TestBundleDiagnostics:
    @pytest.fixture()
    def bundle_dir(self, tmp_path):
        save_bundle(make_bundle(seed=9), tmp_path / "bundle")
        return tmp_path / "bundle"

    def test_truncated_blob_names_the_file(self, bundle_dir):
        blob = bundle_dir / "blobs" / "img_000_00_features.f32"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(DataError, match="img_000_00_features.f32"):
            load_bundle(bundle_dir)

    def test_missing_blob_names_the_file(self, bundle_dir):
        (bundle_dir / "blobs" / "img_000_00_embedding.f32").unlink()
        with pytest.raises(DataError, match="img_000_00_embedding.f32"):
            load_bundle(bundle_dir)

    def test_unknown_schema_version_is_fatal(self, bundle_dir):
        manifest = json.loads((bundle_dir / "manifest.json").read_text())
        manifest["schema_version"] = 99
        (bundle_dir / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="schema_version"):
            load_bundle(bundle_dir)

    def test_unknown_field_warns_but_loads(self, bundle_dir, caplog):
        manifest = json.loads((bundle_dir / "manifest.json").read_text())
        manifest["exporter_notes"] = {"anything": True}
        (bundle_dir / "manifest.json").write_text(json.dumps(manifest))
        with caplog.at_level(logging.WARNING, logger="semcf"):
            load_bundle(bundle_dir)
        assert any("exporter_notes" in r.message for r in caplog.records)

    def test_duplicate_image_id(self, bundle_dir):
        manifest = json.loads((bundle_dir / "manifest.json").read_text())
        manifest["images"].append(manifest["images"][0])
        (bundle_dir / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="duplicate image id"):
            load_bundle(bundle_dir)

    def test_bad_class_index(self, bundle_dir):
        manifest = json.loads((bundle_dir / "manifest.json").read_text())
        manifest["images"][0]["class"] = 42
        (bundle_dir / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="class index"):
            load_bundle(bundle_dir)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_bundle(tmp_path / "nowhere")


class TestTraceRoundTrip:
    def test_empty_success_trace(self, tmp_path):
        doc = TraceDocument(sample_trace(with_edits=False), SearchConfig())
        path = save_trace(doc, tmp_path / "t.json")
        assert load_trace(path) == doc

    def test_three_edit_trace_with_attributes(self, tmp_path):
        doc = TraceDocument(
            sample_trace(),
            SearchConfig(semantic_weight=0.7, max_edits=9, constraint_mode="hard"),
            metrics={"near_kp": 0.75, "same_kp": 0.5},
            attributes=[
                {"attribute": 4, "name": "attr_004", "part": 1, "s": 0.25, "s_prime": 0.5, "delta": 0.25}
            ],
        )
        path = save_trace(doc, tmp_path / "t.json")
        assert load_trace(path) == doc

    def test_failure_flag_round_trips(self, tmp_path):
        doc = TraceDocument(sample_trace(success=False), SearchConfig())
        loaded = load_trace(save_trace(doc, tmp_path / "t.json"))
        assert loaded.trace.success is False
        assert loaded == doc

    def test_save_is_deterministic(self, tmp_path):
        doc = TraceDocument(sample_trace(), SearchConfig())
        a = save_trace(doc, tmp_path / "a.json").read_bytes()
        b = save_trace(doc, tmp_path / "b.json").read_bytes()
        assert a == b

    def test_float_fidelity(self, tmp_path):
        # awkward floats must survive the JSON round trip bit-exactly
        trace = sample_trace(with_edits=False)
        trace.final_probs = np.array([0.1, 0.2, 0.30000000000000004, 1 / 3])
        doc = TraceDocument(trace, SearchConfig(semantic_weight=0.1 + 0.2))
        loaded = load_trace(save_trace(doc, tmp_path / "t.json"))
        assert np.array_equal(loaded.trace.final_probs, trace.final_probs)
        assert loaded.config.semantic_weight == doc.config.semantic_weight

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"format": "something-else"}))
        with pytest.raises(DataError, match="format"):
            load_trace(path)


class TestDebugDumps:
    def test_assignment_and_table_dumps(self, tmp_path):
        from semcf import cluster_embeddings, similarity_table
        from conftest import random_embedding

        rng = np.random.default_rng(3)
        grids = {f"im{i}": random_embedding(rng, 2, 2, 4) for i in range(2)}
        assignment = cluster_embeddings(grids, k=2, seed=0)
        path = save_assignment_debug(assignment, tmp_path / "assignment.json")
        data = json.loads(path.read_text())
        assert data["k"] == 2 and set(data["labels"]) == {"im0", "im1"}

        table = similarity_table(grids["im0"], [grids["im1"]], 0.1)
        path = save_table_debug(table, tmp_path / "table.json")
        data = json.loads(path.read_text())
        assert data["temperature"] == 0.1
        assert len(data["likelihood"]) == 4
