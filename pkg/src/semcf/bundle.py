"""On-disk formats.

A *bundle* is a directory with a ``manifest.json`` plus raw tensor blobs:
little-endian IEEE-754 float32, row-major, shapes declared only in the
manifest. Traces serialize to a standalone JSON document. All writes are
deterministic byte streams; no timestamps enter any payload.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .attributes import AttributeBank, PartProbGrid
from .errors import DataError
from .grids import EmbeddingGrid, FeatureGrid
from .heads import Candidate, DecisionHead
from .metrics import Keypoint, KeypointSet
from .search import Edit, EditTrace, SearchConfig, SearchStats
from .semantic import ClusterAssignment, SimilarityTable

__all__ = [
    "Bundle",
    "ImageRecord",
    "TraceDocument",
    "load_bundle",
    "save_bundle",
    "load_trace",
    "save_trace",
    "save_assignment_debug",
    "save_table_debug",
]

logger = logging.getLogger("semcf")

BUNDLE_SCHEMA_VERSION = 1
TRACE_SCHEMA_VERSION = 1
TRACE_FORMAT = "semcf-trace"

_ID_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")

_KNOWN_MANIFEST_KEYS = {
    "schema_version",
    "grid",
    "class_names",
    "head",
    "images",
    "part_names",
    "part_aliases",
    "attribute_bank",
    "class_attributes",
    "confusion_matrix",
    "metadata",
}
_KNOWN_IMAGE_KEYS = {"id", "class", "features", "embedding", "keypoints", "mask", "part_probs"}
_KNOWN_TRACE_KEYS = {
    "format",
    "schema_version",
    "query_id",
    "query_class",
    "target_class",
    "distractor_ids",
    "config",
    "success",
    "edits",
    "final_probs",
    "stats",
    "metrics",
    "attributes",
}


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One image's exported tensors and optional annotations."""

    image_id: str
    class_index: int
    features: FeatureGrid
    embedding: EmbeddingGrid
    keypoints: KeypointSet | None = None
    mask: np.ndarray | None = None
    part_probs: PartProbGrid | None = None


@dataclass(eq=False)
class Bundle:
    """A validated in-memory bundle."""

    height: int
    width: int
    channels: int
    embedding_channels: int
    class_names: tuple[str, ...]
    head: DecisionHead
    images: dict[str, ImageRecord]
    part_names: tuple[str, ...] | None = None
    part_aliases: dict[int, int] = field(default_factory=dict)
    attribute_bank: AttributeBank | None = None
    class_attributes: np.ndarray | None = None
    confusion_matrix: np.ndarray | None = None
    metadata: dict | None = None

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def image(self, image_id: str) -> ImageRecord:
        try:
            return self.images[image_id]
        except KeyError:
            raise DataError(f"bundle has no image {image_id!r}") from None

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise DataError(f"bundle has no class named {name!r}") from None

    def images_of_class(self, class_index: int) -> list[str]:
        return [i for i, rec in self.images.items() if rec.class_index == class_index]


def _warn_unknown(mapping: Mapping[str, Any], known: set[str], where: str) -> None:
    for key in mapping:
        if key not in known:
            logger.warning("ignoring unknown field %r in %s", key, where)


def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise DataError(f"{where} is missing required field {key!r}")
    return mapping[key]


def _load_blob(root: Path, ref: Any, expected_shape: tuple[int, ...], what: str) -> np.ndarray:
    if not isinstance(ref, dict) or "file" not in ref or "shape" not in ref:
        raise DataError(f"{what}: blob reference must carry 'file' and 'shape'")
    rel = str(ref["file"])
    shape = tuple(int(s) for s in ref["shape"])
    if shape != expected_shape:
        raise DataError(f"{what}: declared shape {list(shape)} does not match expected {list(expected_shape)}")
    path = root / rel
    if not path.is_file():
        raise DataError(f"{what}: missing blob file {rel!r}")
    expected_bytes = 4 * int(np.prod(shape)) if shape else 4
    actual = path.stat().st_size
    if actual != expected_bytes:
        raise DataError(
            f"{what}: blob {rel!r} holds {actual} bytes, expected {expected_bytes} "
            f"for shape {list(shape)}"
        )
    data = np.fromfile(path, dtype="<f4").reshape(shape)
    if not np.isfinite(data).all():
        raise DataError(f"{what}: blob {rel!r} contains non-finite values")
    return data


def _load_keypoints(raw: Any, image_id: str, aliases: Mapping[int, int]) -> KeypointSet:
    where = f"keypoints of image {image_id!r}"
    width = int(_require(raw, "image_width", where))
    height = int(_require(raw, "image_height", where))
    points = []
    for entry in _require(raw, "points", where):
        part = int(_require(entry, "part", where))
        part = aliases.get(part, part)
        points.append(
            Keypoint(
                part=part,
                x=float(_require(entry, "x", where)),
                y=float(_require(entry, "y", where)),
                visible=bool(_require(entry, "visible", where)),
            )
        )
    return KeypointSet(image_id, width, height, tuple(points))


def load_bundle(path: str | Path) -> Bundle:
    """Read and validate a bundle directory (or its manifest file)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise DataError(f"no bundle manifest at {manifest_path}")
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"bundle manifest is not valid JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise DataError("bundle manifest must be a JSON object")
    version = _require(manifest, "schema_version", "manifest")
    if version != BUNDLE_SCHEMA_VERSION:
        raise DataError(
            f"unsupported bundle schema_version {version!r}; this reader understands "
            f"{BUNDLE_SCHEMA_VERSION}"
        )
    _warn_unknown(manifest, _KNOWN_MANIFEST_KEYS, "manifest")

    grid = _require(manifest, "grid", "manifest")
    height = int(_require(grid, "height", "manifest grid"))
    width = int(_require(grid, "width", "manifest grid"))
    channels = int(_require(grid, "channels", "manifest grid"))
    embedding_channels = int(_require(grid, "embedding_channels", "manifest grid"))
    num_cells = height * width

    class_names = tuple(str(n) for n in _require(manifest, "class_names", "manifest"))
    if not class_names:
        raise DataError("manifest lists no classes")

    head_spec = _require(manifest, "head", "manifest")
    kind = str(_require(head_spec, "kind", "manifest head"))
    layers = []
    layer_specs = _require(head_spec, "layers", "manifest head")
    in_dim = channels if kind == "gap_linear" else num_cells * channels
    for idx, layer in enumerate(layer_specs):
        out_dim = int(layer["weight"]["shape"][0]) if "weight" in layer and "shape" in layer["weight"] else 0
        weight = _load_blob(root, _require(layer, "weight", f"head layer {idx}"), (out_dim, in_dim), f"head layer {idx} weight")
        bias = _load_blob(root, _require(layer, "bias", f"head layer {idx}"), (out_dim,), f"head layer {idx} bias")
        layers.append((weight, bias))
        in_dim = out_dim
    head = DecisionHead(kind, tuple(layers), class_names)

    aliases: dict[int, int] = {}
    for key, value in (manifest.get("part_aliases") or {}).items():
        aliases[int(key)] = int(value)

    part_names = manifest.get("part_names")
    if part_names is not None:
        part_names = tuple(str(n) for n in part_names)

    images: dict[str, ImageRecord] = {}
    for entry in _require(manifest, "images", "manifest"):
        _warn_unknown(entry, _KNOWN_IMAGE_KEYS, "image entry")
        image_id = str(_require(entry, "id", "image entry"))
        if image_id in images:
            raise DataError(f"duplicate image id {image_id!r} in manifest")
        class_index = int(_require(entry, "class", f"image {image_id!r}"))
        if not 0 <= class_index < len(class_names):
            raise DataError(f"image {image_id!r}: class index {class_index} out of range")
        features = FeatureGrid(
            height,
            width,
            channels,
            _load_blob(root, _require(entry, "features", f"image {image_id!r}"), (num_cells, channels), f"image {image_id!r} features"),
        )
        embedding = EmbeddingGrid.normalized(
            height,
            width,
            _load_blob(root, _require(entry, "embedding", f"image {image_id!r}"), (num_cells, embedding_channels), f"image {image_id!r} embedding"),
        )
        keypoints = None
        if entry.get("keypoints") is not None:
            keypoints = _load_keypoints(entry["keypoints"], image_id, aliases)
        mask = None
        if entry.get("mask") is not None:
            raw_mask = entry["mask"]
            if len(raw_mask) != num_cells:
                raise DataError(f"image {image_id!r}: mask has {len(raw_mask)} cells, expected {num_cells}")
            mask = np.asarray(raw_mask, dtype=bool)
        part_probs = None
        if entry.get("part_probs") is not None:
            ref = entry["part_probs"]
            num_parts = int(ref["shape"][1]) if "shape" in ref and len(ref["shape"]) == 2 else 0
            part_probs = PartProbGrid(
                height,
                width,
                _load_blob(root, ref, (num_cells, num_parts), f"image {image_id!r} part_probs"),
            )
        images[image_id] = ImageRecord(
            image_id, class_index, features, embedding, keypoints, mask, part_probs
        )
    if not images:
        raise DataError("manifest lists no images")

    attribute_bank = None
    if manifest.get("attribute_bank") is not None:
        spec = manifest["attribute_bank"]
        names = tuple(str(n) for n in _require(spec, "names", "attribute bank"))
        parts = tuple(int(p) for p in _require(spec, "parts", "attribute bank"))
        weights = _load_blob(
            root, _require(spec, "weights", "attribute bank"), (len(names), channels), "attribute bank weights"
        )
        biases = _load_blob(root, _require(spec, "biases", "attribute bank"), (len(names),), "attribute bank biases")
        attribute_bank = AttributeBank(weights, biases, names, parts)

    class_attributes = None
    if manifest.get("class_attributes") is not None:
        ref = manifest["class_attributes"]
        num_attrs = int(ref["shape"][1]) if "shape" in ref and len(ref["shape"]) == 2 else 0
        class_attributes = _load_blob(
            root, ref, (len(class_names), num_attrs), "class attribute matrix"
        ).astype(np.float64)
        if ((class_attributes < 0) | (class_attributes > 1)).any():
            raise DataError("class attribute matrix entries must lie in [0, 1]")

    confusion = None
    if manifest.get("confusion_matrix") is not None:
        confusion = np.asarray(manifest["confusion_matrix"], dtype=np.int64)
        if confusion.shape != (len(class_names), len(class_names)):
            raise DataError(
                f"confusion matrix shape {confusion.shape} does not match {len(class_names)} classes"
            )
        if (confusion < 0).any():
            raise DataError("confusion matrix has negative entries")

    return Bundle(
        height=height,
        width=width,
        channels=channels,
        embedding_channels=embedding_channels,
        class_names=class_names,
        head=head,
        images=images,
        part_names=part_names,
        part_aliases=aliases,
        attribute_bank=attribute_bank,
        class_attributes=class_attributes,
        confusion_matrix=confusion,
        metadata=manifest.get("metadata"),
    )


def _check_file_id(image_id: str) -> None:
    if not _ID_PATTERN.match(image_id):
        raise DataError(
            f"image id {image_id!r} is not filename-safe (use letters, digits, '.', '_', '-')"
        )


def _write_blob(root: Path, rel: str, array: np.ndarray) -> dict[str, Any]:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<f4")
    data.tofile(path)
    return {"file": rel, "shape": list(array.shape)}


def save_bundle(bundle: Bundle, path: str | Path) -> Path:
    """Write a bundle directory; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    head_layers = []
    for idx, (weight, bias) in enumerate(bundle.head.layers):
        head_layers.append(
            {
                "weight": _write_blob(root, f"blobs/head_{idx}_weight.f32", weight),
                "bias": _write_blob(root, f"blobs/head_{idx}_bias.f32", bias),
            }
        )
    manifest: dict[str, Any] = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "grid": {
            "height": bundle.height,
            "width": bundle.width,
            "channels": bundle.channels,
            "embedding_channels": bundle.embedding_channels,
        },
        "class_names": list(bundle.class_names),
        "head": {"kind": bundle.head.kind, "layers": head_layers},
    }
    if bundle.part_names is not None:
        manifest["part_names"] = list(bundle.part_names)
    if bundle.part_aliases:
        manifest["part_aliases"] = {str(k): v for k, v in sorted(bundle.part_aliases.items())}
    entries = []
    for image_id, rec in bundle.images.items():
        _check_file_id(image_id)
        entry: dict[str, Any] = {
            "id": image_id,
            "class": rec.class_index,
            "features": _write_blob(root, f"blobs/{image_id}_features.f32", rec.features.data),
            "embedding": _write_blob(root, f"blobs/{image_id}_embedding.f32", rec.embedding.data),
        }
        if rec.keypoints is not None:
            entry["keypoints"] = {
                "image_width": rec.keypoints.image_width,
                "image_height": rec.keypoints.image_height,
                "points": [
                    {"part": pt.part, "x": pt.x, "y": pt.y, "visible": pt.visible}
                    for pt in rec.keypoints.points
                ],
            }
        if rec.mask is not None:
            entry["mask"] = [int(v) for v in rec.mask]
        if rec.part_probs is not None:
            entry["part_probs"] = _write_blob(
                root, f"blobs/{image_id}_part_probs.f32", rec.part_probs.probs
            )
        entries.append(entry)
    manifest["images"] = entries
    if bundle.attribute_bank is not None:
        manifest["attribute_bank"] = {
            "weights": _write_blob(root, "blobs/attribute_weights.f32", bundle.attribute_bank.weights),
            "biases": _write_blob(root, "blobs/attribute_biases.f32", bundle.attribute_bank.biases),
            "names": list(bundle.attribute_bank.names),
            "parts": list(bundle.attribute_bank.parts),
        }
    if bundle.class_attributes is not None:
        manifest["class_attributes"] = _write_blob(
            root, "blobs/class_attributes.f32", np.asarray(bundle.class_attributes, dtype=np.float32)
        )
    if bundle.confusion_matrix is not None:
        manifest["confusion_matrix"] = [[int(v) for v in row] for row in bundle.confusion_matrix]
    if bundle.metadata is not None:
        manifest["metadata"] = bundle.metadata
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


@dataclass(eq=False)
class TraceDocument:
    """A search trace plus the config that produced it and optional add-ons."""

    trace: EditTrace
    config: SearchConfig
    metrics: dict[str, float] | None = None
    attributes: list[dict[str, Any]] | None = None

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, TraceDocument)
            and self.trace == other.trace
            and self.config == other.config
            and self.metrics == other.metrics
            and self.attributes == other.attributes
        )


def _config_to_json(config: SearchConfig) -> dict[str, Any]:
    return {
        "semantic_weight": config.semantic_weight,
        "temperature": config.temperature,
        "prefilter_fraction": config.prefilter_fraction,
        "max_edits": config.max_edits,
        "constraint_mode": config.constraint_mode,
        "normalization": config.normalization,
        "reuse_cells": config.reuse_cells,
    }


def _config_from_json(raw: Mapping[str, Any]) -> SearchConfig:
    return SearchConfig(
        semantic_weight=float(raw["semantic_weight"]),
        temperature=float(raw["temperature"]),
        prefilter_fraction=float(raw["prefilter_fraction"]),
        max_edits=None if raw["max_edits"] is None else int(raw["max_edits"]),
        constraint_mode=str(raw["constraint_mode"]),
        normalization=str(raw["normalization"]),
        reuse_cells=bool(raw["reuse_cells"]),
    )


def save_trace(doc: TraceDocument, path: str | Path) -> Path:
    """Serialize a trace document to JSON with a stable field order."""
    trace = doc.trace
    payload: dict[str, Any] = {
        "format": TRACE_FORMAT,
        "schema_version": TRACE_SCHEMA_VERSION,
        "query_id": trace.query_id,
        "query_class": trace.query_class,
        "target_class": trace.target_class,
        "distractor_ids": list(trace.distractor_ids),
        "config": _config_to_json(doc.config),
        "success": trace.success,
        "edits": [
            {
                "query_cell": e.candidate.query_cell,
                "distractor_image": e.candidate.distractor_image,
                "distractor_cell": e.candidate.distractor_cell,
                "class_prob_after": e.class_prob_after,
                "semantic_likelihood": e.semantic_likelihood,
                "combined_score": e.combined_score,
            }
            for e in trace.edits
        ],
        "final_probs": [float(p) for p in trace.final_probs],
        "stats": {
            "head_evals": trace.stats.head_evals,
            "candidate_evals": trace.stats.candidate_evals,
            "dot_products": trace.stats.dot_products,
            "candidate_evals_per_edit": list(trace.stats.candidate_evals_per_edit),
        },
        "metrics": doc.metrics,
        "attributes": doc.attributes,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_trace(path: str | Path) -> TraceDocument:
    """Parse a trace document written by save_trace."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no trace file at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"trace file is not valid JSON: {exc}") from None
    if raw.get("format") != TRACE_FORMAT:
        raise DataError(f"not a trace document: format={raw.get('format')!r}")
    if raw.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise DataError(f"unsupported trace schema_version {raw.get('schema_version')!r}")
    _warn_unknown(raw, _KNOWN_TRACE_KEYS, "trace document")
    edits = [
        Edit(
            candidate=Candidate(
                int(e["query_cell"]), int(e["distractor_image"]), int(e["distractor_cell"])
            ),
            class_prob_after=float(e["class_prob_after"]),
            semantic_likelihood=(
                None if e["semantic_likelihood"] is None else float(e["semantic_likelihood"])
            ),
            combined_score=float(e["combined_score"]),
        )
        for e in _require(raw, "edits", "trace document")
    ]
    stats_raw = _require(raw, "stats", "trace document")
    stats = SearchStats(
        head_evals=int(stats_raw["head_evals"]),
        candidate_evals=int(stats_raw["candidate_evals"]),
        dot_products=int(stats_raw["dot_products"]),
        candidate_evals_per_edit=[int(v) for v in stats_raw["candidate_evals_per_edit"]],
    )
    trace = EditTrace(
        query_id=str(_require(raw, "query_id", "trace document")),
        query_class=int(_require(raw, "query_class", "trace document")),
        target_class=int(_require(raw, "target_class", "trace document")),
        distractor_ids=[str(i) for i in _require(raw, "distractor_ids", "trace document")],
        edits=edits,
        success=bool(_require(raw, "success", "trace document")),
        final_probs=np.asarray(_require(raw, "final_probs", "trace document"), dtype=np.float64),
        stats=stats,
    )
    return TraceDocument(
        trace=trace,
        config=_config_from_json(_require(raw, "config", "trace document")),
        metrics=raw.get("metrics"),
        attributes=raw.get("attributes"),
    )


def save_assignment_debug(assignment: ClusterAssignment, path: str | Path) -> Path:
    """Dump a cluster assignment as JSON for inspection."""
    payload = {
        "k": assignment.k,
        "seed": assignment.seed,
        "inertia": assignment.inertia,
        "centers": [[float(v) for v in row] for row in assignment.centers],
        "labels": {image_id: [int(v) for v in labels] for image_id, labels in assignment.labels.items()},
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def save_table_debug(table: SimilarityTable, path: str | Path) -> Path:
    """Dump a similarity table as JSON for inspection."""
    payload = {
        "temperature": table.temperature,
        "normalization": table.normalization,
        "num_images": table.num_images,
        "likelihood": [[float(v) for v in row] for row in table.likelihood],
    }
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path
