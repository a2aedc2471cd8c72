"""Standalone bundle writer.

Implements the bundle directory layout consumed by the semcf engine
(raw little-endian float32 blobs plus a JSON manifest) without importing
it; the format documentation in the engine's README is the contract.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1


def _write_blob(root: Path, rel: str, array: np.ndarray) -> dict[str, Any]:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<f4")
    data.tofile(path)
    return {"file": rel, "shape": list(array.shape)}


def write_bundle(
    out: str | Path,
    height: int,
    width: int,
    class_names: Sequence[str],
    head_kind: str,
    head_layers: Sequence[tuple[np.ndarray, np.ndarray]],
    images: Sequence[Mapping[str, Any]],
    part_names: Sequence[str] | None = None,
    part_aliases: Mapping[int, int] | None = None,
    attribute_bank: Mapping[str, Any] | None = None,
    class_attributes: np.ndarray | None = None,
    confusion_matrix: np.ndarray | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write a bundle directory; every image mapping carries
    ``id``, ``class`` (index), ``features`` and ``embedding`` cell matrices,
    plus optional ``keypoints``/``mask``/``part_probs``.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    channels = images[0]["features"].shape[1]
    embedding_channels = images[0]["embedding"].shape[1]
    layer_refs = []
    for idx, (weight, bias) in enumerate(head_layers):
        layer_refs.append(
            {
                "weight": _write_blob(root, f"blobs/head_{idx}_weight.f32", weight),
                "bias": _write_blob(root, f"blobs/head_{idx}_bias.f32", bias),
            }
        )
    manifest: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "grid": {
            "height": height,
            "width": width,
            "channels": channels,
            "embedding_channels": embedding_channels,
        },
        "class_names": list(class_names),
        "head": {"kind": head_kind, "layers": layer_refs},
    }
    if part_names is not None:
        manifest["part_names"] = list(part_names)
    if part_aliases:
        manifest["part_aliases"] = {str(k): int(v) for k, v in sorted(part_aliases.items())}
    entries = []
    for record in images:
        image_id = record["id"]
        entry: dict[str, Any] = {
            "id": image_id,
            "class": int(record["class"]),
            "features": _write_blob(root, f"blobs/{image_id}_features.f32", record["features"]),
            "embedding": _write_blob(root, f"blobs/{image_id}_embedding.f32", record["embedding"]),
        }
        if record.get("keypoints") is not None:
            entry["keypoints"] = record["keypoints"]
        if record.get("mask") is not None:
            entry["mask"] = [int(v) for v in record["mask"]]
        if record.get("part_probs") is not None:
            entry["part_probs"] = _write_blob(
                root, f"blobs/{image_id}_part_probs.f32", np.asarray(record["part_probs"])
            )
        entries.append(entry)
    manifest["images"] = entries
    if attribute_bank is not None:
        manifest["attribute_bank"] = {
            "weights": _write_blob(root, "blobs/attribute_weights.f32", attribute_bank["weights"]),
            "biases": _write_blob(root, "blobs/attribute_biases.f32", attribute_bank["biases"]),
            "names": [str(n) for n in attribute_bank["names"]],
            "parts": [int(p) for p in attribute_bank["parts"]],
        }
    if class_attributes is not None:
        manifest["class_attributes"] = _write_blob(
            root, "blobs/class_attributes.f32", np.asarray(class_attributes, dtype=np.float32)
        )
    if confusion_matrix is not None:
        manifest["confusion_matrix"] = [[int(v) for v in row] for row in confusion_matrix]
    if metadata is not None:
        manifest["metadata"] = dict(metadata)
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path
