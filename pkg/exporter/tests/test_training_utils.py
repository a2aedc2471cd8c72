import json

import numpy as np
import pytest

from cfexport import ExportConfig, export_bundle
from cfexport.training import (
    project_points_to_cells,
    train_attribute_classifiers,
    train_parts_detector,
)


def test_keypoint_projection_floor_mapping():
    points = [
        {"part": 0, "x": 10.0, "y": 10.0, "visible": True},
        {"part": 1, "x": 90.0, "y": 90.0, "visible": True},
        {"part": 2, "x": 50.0, "y": 50.0, "visible": False},
    ]
    cells = project_points_to_cells(points, 96, 96, 7, 7)
    assert cells[0 * 7 + 0] == {0}
    assert cells[6 * 7 + 6] == {1}
    assert sum(len(c) for c in cells) == 2


@pytest.fixture(scope="module")
def keypoints_file(pair_manifest, tmp_path_factory):
    images = json.loads(pair_manifest.read_text())["images"]
    payload = {
        "images": {
            entry["id"]: {
                "keypoints": {
                    "image_width": 96,
                    "image_height": 96,
                    "points": [
                        {"part": 0, "x": 12.0, "y": 12.0, "visible": True},
                        {"part": 1, "x": 80.0, "y": 40.0, "visible": True},
                    ],
                }
            }
            for entry in images
        }
    }
    path = tmp_path_factory.mktemp("kp") / "keypoints.json"
    path.write_text(json.dumps(payload))
    return path


def test_parts_detector_smoke(pair_manifest, keypoints_file, tmp_path):
    out = train_parts_detector(
        pair_manifest,
        keypoints_file,
        tmp_path / "parts.json",
        backbone="resnet18",
        epochs=1,
        batch_size=2,
        seed=0,
    )
    payload = json.loads(out.read_text())
    assert len(payload["images"]) == 2
    for record in payload["images"].values():
        grid = np.array(record["part_probs"])
        assert grid.shape == (49, 2)
        # per-cell softmax over parts
        assert np.allclose(grid.sum(axis=1), 1.0, atol=1e-5)

    # the emitted grids slot straight into an export
    bundle_out = tmp_path / "bundle"
    export_bundle(
        ExportConfig(
            image_manifest=str(pair_manifest),
            out=str(bundle_out),
            backbone="resnet18",
            seed=0,
            batch_size=2,
            annotations=str(out),
            consistency_sample=2,
        )
    )
    manifest = json.loads((bundle_out / "manifest.json").read_text())
    assert all("part_probs" in entry for entry in manifest["images"])


def test_attribute_classifier_smoke(pair_manifest, tmp_path):
    attrs = tmp_path / "attrs.npz"
    np.savez(
        attrs,
        class_attributes=np.array([[0.9, 0.1, 0.7], [0.2, 0.8, 0.6]]),
        names=np.array(["stripe", "spot", "crest"]),
        parts=np.array([0, 0, 1]),
    )
    out = train_attribute_classifiers(
        pair_manifest,
        attrs,
        tmp_path / "bank.npz",
        backbone="resnet18",
        epochs=2,
        batch_size=2,
        seed=0,
    )
    bank = np.load(out, allow_pickle=False)
    assert bank["weights"].shape == (3, 512)
    assert bank["biases"].shape == (3,)
    assert list(bank["names"]) == ["stripe", "spot", "crest"]
    assert list(bank["parts"]) == [0, 0, 1]
