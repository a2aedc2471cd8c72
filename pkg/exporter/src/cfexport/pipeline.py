"""The export pipeline: images through the split model into a bundle."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ExportConfig, ImageManifest
from .confusion import confusion_from_predictions, predict_classes
from .extract import load_batch, resample_maps, spatial_maps, to_cell_matrix
from .models import build_aux_trunk, build_split, numpy_head_forward

logger = logging.getLogger("cfexport")


def _batched(items, size):
    for start in range(0, len(items), size):
        yield start, items[start : start + size]


def _load_annotations(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _load_npz_bank(path: str | None):
    if path is None:
        return None
    data = np.load(path, allow_pickle=False)
    return {
        "weights": data["weights"].astype(np.float32),
        "biases": data["biases"].astype(np.float32),
        "names": [str(n) for n in data["names"]],
        "parts": [int(p) for p in data["parts"]],
    }


def export_bundle(config: ExportConfig) -> Path:
    """Run the full export; returns the manifest path.

    The head and every image's feature grid come from the same split
    model, so recomputing the head on the exported cells must reproduce
    the source model's predictions; the measured agreement over a sample
    is embedded in the manifest metadata.
    """
    manifest = ImageManifest.from_json(config.image_manifest)
    if not manifest.images:
        raise ValueError("image manifest lists no images")
    split = build_split(
        config.backbone, config.weights, config.seed, num_classes=len(manifest.classes)
    )
    aux = build_aux_trunk(config.aux_backbone, config.aux_weights, config.seed + 1)
    annotations = _load_annotations(config.annotations)
    per_image_annotations = annotations.get("images", {})

    records: list[dict[str, Any]] = []
    grid_shape: tuple[int, int] | None = None
    check_budget = min(config.consistency_sample, len(manifest.images))
    agree = 0
    checked = 0
    for _, chunk in _batched(manifest.images, config.batch_size):
        batch = load_batch([entry.path for entry in chunk])
        feature_maps = spatial_maps(split.trunk, batch)
        height, width = int(feature_maps.shape[2]), int(feature_maps.shape[3])
        if grid_shape is None:
            grid_shape = (height, width)
            if config.expect_grid is not None and grid_shape != tuple(config.expect_grid):
                raise ValueError(
                    f"split point yields a {height}x{width} grid, expected "
                    f"{config.expect_grid[0]}x{config.expect_grid[1]}"
                )
        elif grid_shape != (height, width):
            raise ValueError("inconsistent feature grid shapes across the batch")
        aux_maps = resample_maps(spatial_maps(aux, batch), height, width)
        with torch.no_grad():
            source_logits = split.full_model(batch)
        for offset, entry in enumerate(chunk):
            cells = to_cell_matrix(feature_maps[offset])
            embedding = to_cell_matrix(aux_maps[offset])
            if checked < check_budget:
                exported_pred = int(np.argmax(numpy_head_forward(split, cells)))
                source_pred = int(torch.argmax(source_logits[offset]))
                agree += exported_pred == source_pred
                checked += 1
            record: dict[str, Any] = {
                "id": entry.image_id,
                "class": manifest.class_index(entry.class_name),
                "features": cells,
                "embedding": embedding,
            }
            extra = per_image_annotations.get(entry.image_id, {})
            for key in ("keypoints", "mask", "part_probs"):
                if key in extra:
                    record[key] = extra[key]
            records.append(record)

    agreement = agree / checked if checked else None
    if agreement is not None and agreement < 0.99:
        logger.warning(
            "exported head agrees with the source model on only %.1f%% of %d sampled images",
            100 * agreement,
            checked,
        )

    confusion = None
    if config.include_confusion:
        predictions = predict_classes(
            split.full_model, [e.path for e in manifest.images], config.batch_size
        )
        truth = np.array([manifest.class_index(e.class_name) for e in manifest.images])
        confusion = confusion_from_predictions(truth, predictions, len(manifest.classes))

    class_attributes = None
    if config.class_attributes is not None:
        class_attributes = np.load(config.class_attributes, allow_pickle=False)
        if hasattr(class_attributes, "files"):  # npz archive
            class_attributes = class_attributes["class_attributes"]

    from .writer import write_bundle

    assert grid_shape is not None
    metadata = {
        "exporter": "cfexport",
        "backbone": config.backbone,
        "weights": config.weights or f"random(seed={config.seed})",
        "aux_backbone": config.aux_backbone,
        "aux_weights": config.aux_weights or f"random(seed={config.seed + 1})",
        "consistency_checked": checked,
        "consistency_agreement": agreement,
    }
    return write_bundle(
        config.out,
        grid_shape[0],
        grid_shape[1],
        manifest.classes,
        split.head_kind,
        split.head_layers,
        records,
        part_names=annotations.get("part_names"),
        part_aliases={int(k): int(v) for k, v in annotations.get("part_aliases", {}).items()},
        attribute_bank=_load_npz_bank(config.attribute_bank),
        class_attributes=class_attributes,
        confusion_matrix=confusion,
        metadata=metadata,
    )
