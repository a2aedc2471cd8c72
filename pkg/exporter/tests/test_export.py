import json
import subprocess
from pathlib import Path

import numpy as np
import pytest

from cfexport import ExportConfig, export_bundle
from cfexport.cli import main


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


def toy_config(manifest: Path, out: Path, **overrides) -> ExportConfig:
    params = dict(
        image_manifest=str(manifest),
        out=str(out),
        backbone="resnet18",
        aux_backbone="resnet18",
        seed=0,
        batch_size=8,
        consistency_sample=10,
    )
    params.update(overrides)
    return ExportConfig(**params)


@pytest.fixture(scope="session")
def toy_bundle(toy_manifest, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("export") / "bundle"
    export_bundle(toy_config(toy_manifest, out, include_confusion=True))
    return out


@pytest.fixture(scope="session")
def wide_bundle(wide_manifest, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("export") / "wide"
    export_bundle(toy_config(wide_manifest, out, batch_size=32, consistency_sample=200))
    return out


class TestExportBundle:
    def test_manifest_structure_and_blob_sizes(self, toy_bundle):
        manifest = json.loads((toy_bundle / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert manifest["grid"]["height"] == manifest["grid"]["width"] == 7
        assert manifest["grid"]["channels"] == 512
        assert manifest["head"]["kind"] == "gap_linear"
        assert len(manifest["images"]) == 10
        for entry in manifest["images"]:
            for key in ("features", "embedding"):
                ref = entry[key]
                blob = toy_bundle / ref["file"]
                assert blob.stat().st_size == 4 * int(np.prod(ref["shape"]))
        assert manifest["metadata"]["consistency_agreement"] == 1.0

    def test_engine_accepts_the_export(self, toy_bundle, tmp_path):
        manifest = json.loads((toy_bundle / "manifest.json").read_text())
        query = manifest["images"][0]["id"]
        distractors = [
            e["id"] for e in manifest["images"] if e["class"] != manifest["images"][0]["class"]
        ][:2]
        out = tmp_path / "trace.json"
        proc = subprocess.run(
            [
                "semcf",
                "explain",
                "--bundle",
                str(toy_bundle),
                "--query",
                query,
                *sum([["--distractor", d] for d in distractors], []),
                "--topk",
                "1.0",
                "--out",
                str(out),
            ],
            capture_output=True,
            text=True,
        )
        # 0 = flipped, 4 = ran out of edits; anything else means the bundle
        # failed validation or the search crashed
        assert proc.returncode in (0, 4), proc.stderr
        assert out.is_file()

    def test_export_is_deterministic(self, toy_manifest, tmp_path):
        export_bundle(toy_config(toy_manifest, tmp_path / "a"))
        export_bundle(toy_config(toy_manifest, tmp_path / "b"))
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_consistency_agreement_on_200_images(self, wide_bundle):
        metadata = json.loads((wide_bundle / "manifest.json").read_text())["metadata"]
        assert metadata["consistency_checked"] == 200
        assert metadata["consistency_agreement"] >= 0.99

    def test_engine_predictions_agree_with_source_on_200_images(
        self, wide_bundle, wide_manifest, tmp_path
    ):
        # The engine records its own prediction for the unedited query in
        # every trace, so explaining each image reads the exported features
        # back through the engine's forward pass.
        from cfexport.config import ImageManifest
        from cfexport.confusion import predict_classes
        from cfexport.models import build_split

        manifest = ImageManifest.from_json(wide_manifest)
        split = build_split("resnet18", seed=0, num_classes=len(manifest.classes))
        source = predict_classes(split.full_model, [e.path for e in manifest.images], 32)

        trace_dir = tmp_path / "traces"
        args = ["semcf", "explain", "--bundle", str(wide_bundle)]
        for entry in manifest.images:
            args += ["--query", entry.image_id]
        args += [
            "--distractor-class",
            manifest.classes[0],
            "--num-distractors",
            "1",
            "--topk",
            "0.05",
            "--max-edits",
            "3",
            "--out",
            str(trace_dir),
        ]
        proc = subprocess.run(args, capture_output=True, text=True)
        assert proc.returncode in (0, 4), proc.stderr
        agree = 0
        for entry, source_pred in zip(manifest.images, source):
            trace = json.loads((trace_dir / f"{entry.image_id}.json").read_text())
            agree += trace["query_class"] == int(source_pred)
        assert agree / len(manifest.images) >= 0.99

    @pytest.mark.parametrize("backbone", ["resnet50", "vgg16"])
    def test_documented_backbones_export_7x7(self, pair_manifest, tmp_path, backbone):
        out = tmp_path / backbone
        export_bundle(toy_config(pair_manifest, out, backbone=backbone, consistency_sample=2))
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["grid"]["height"] == manifest["grid"]["width"] == 7
        assert manifest["metadata"]["consistency_agreement"] == 1.0
        expected_kind = "gap_linear" if backbone == "resnet50" else "flatten_mlp"
        assert manifest["head"]["kind"] == expected_kind

    def test_annotations_are_merged_and_optional(self, pair_manifest, tmp_path):
        images = json.loads(pair_manifest.read_text())["images"]
        annotated = images[0]["id"]
        annotations = {
            "part_names": ["beak", "wing"],
            "part_aliases": {"2": 1},
            "images": {
                annotated: {
                    "keypoints": {
                        "image_width": 96,
                        "image_height": 96,
                        "points": [{"part": 0, "x": 10.0, "y": 20.0, "visible": True}],
                    },
                    "mask": [1] * 49,
                }
            },
        }
        ann_path = tmp_path / "annotations.json"
        ann_path.write_text(json.dumps(annotations))
        out = tmp_path / "bundle"
        export_bundle(
            toy_config(pair_manifest, out, annotations=str(ann_path), consistency_sample=2)
        )
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["part_names"] == ["beak", "wing"]
        assert manifest["part_aliases"] == {"2": 1}
        by_id = {e["id"]: e for e in manifest["images"]}
        assert "keypoints" in by_id[annotated]
        assert "mask" in by_id[annotated]
        other = [e for e in manifest["images"] if e["id"] != annotated][0]
        assert "keypoints" not in other and "mask" not in other

    def test_attribute_bank_embedding(self, pair_manifest, tmp_path):
        bank_path = tmp_path / "bank.npz"
        np.savez(
            bank_path,
            weights=np.random.default_rng(0).normal(size=(4, 512)).astype(np.float32),
            biases=np.zeros(4, dtype=np.float32),
            names=np.array(["a", "b", "c", "d"]),
            parts=np.array([0, 0, 1, 1]),
        )
        out = tmp_path / "bundle"
        export_bundle(
            toy_config(
                pair_manifest, out, attribute_bank=str(bank_path), consistency_sample=2
            )
        )
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["attribute_bank"]["names"] == ["a", "b", "c", "d"]
        assert manifest["attribute_bank"]["weights"]["shape"] == [4, 512]

    def test_grid_mismatch_is_an_error(self, pair_manifest, tmp_path):
        config = toy_config(
            pair_manifest, tmp_path / "x", expect_grid=(6, 6), consistency_sample=2
        )
        with pytest.raises(ValueError, match="7x7"):
            export_bundle(config)


class TestExportCli:
    def test_export_bundle_command(self, pair_manifest, tmp_path, capsys):
        out = tmp_path / "bundle"
        code = main(
            [
                "export-bundle",
                "--images",
                str(pair_manifest),
                "--out",
                str(out),
                "--backbone",
                "resnet18",
                "--batch-size",
                "4",
            ]
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "consistency" in printed
        assert (out / "manifest.json").is_file()

    def test_config_file_path(self, pair_manifest, tmp_path):
        config = toy_config(pair_manifest, tmp_path / "bundle", consistency_sample=2)
        config_path = tmp_path / "config.json"
        config_path.write_text(config.to_json())
        assert main(["export-bundle", "--config", str(config_path)]) == 0
        assert (tmp_path / "bundle" / "manifest.json").is_file()
