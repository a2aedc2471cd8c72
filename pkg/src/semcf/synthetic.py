"""Deterministic synthetic bundles for tests, demos, and benchmarks.

Everything is drawn from a single seeded generator, so a (preset, seed)
pair always produces byte-identical bundles.
"""

from __future__ import annotations

import numpy as np

from .attributes import AttributeBank, PartProbGrid
from .bundle import Bundle, ImageRecord
from .grids import EmbeddingGrid, FeatureGrid
from .heads import DecisionHead
from .metrics import Keypoint, KeypointSet

__all__ = ["make_bundle", "PRESETS"]


def make_bundle(
    height: int = 4,
    width: int = 4,
    channels: int = 8,
    embedding_channels: int = 6,
    num_classes: int = 4,
    images_per_class: int = 2,
    num_parts: int = 5,
    num_attributes: int = 10,
    seed: int = 0,
    head_kind: str = "gap_linear",
    hidden_dim: int = 16,
    with_annotations: bool = True,
    with_attributes: bool = True,
    image_pixels: int = 224,
) -> Bundle:
    """Build a fully populated random bundle."""
    rng = np.random.default_rng(seed)
    num_cells = height * width
    class_names = tuple(f"class_{c:03d}" for c in range(num_classes))

    if head_kind == "gap_linear":
        layers = (
            (
                rng.normal(scale=1.0, size=(num_classes, channels)).astype(np.float32),
                rng.normal(scale=0.1, size=num_classes).astype(np.float32),
            ),
        )
    elif head_kind == "flatten_mlp":
        flat = num_cells * channels
        layers = (
            (
                rng.normal(scale=1.0 / np.sqrt(flat), size=(hidden_dim, flat)).astype(np.float32),
                rng.normal(scale=0.1, size=hidden_dim).astype(np.float32),
            ),
            (
                rng.normal(scale=1.0, size=(num_classes, hidden_dim)).astype(np.float32),
                rng.normal(scale=0.1, size=num_classes).astype(np.float32),
            ),
        )
    else:
        raise ValueError(f"unknown head kind {head_kind!r}")
    head = DecisionHead(head_kind, layers, class_names)

    images: dict[str, ImageRecord] = {}
    for c in range(num_classes):
        for i in range(images_per_class):
            image_id = f"img_{c:03d}_{i:02d}"
            features = FeatureGrid(
                height, width, channels, rng.normal(size=(num_cells, channels)).astype(np.float32)
            )
            embedding = EmbeddingGrid.normalized(
                height, width, rng.normal(size=(num_cells, embedding_channels))
            )
            keypoints = None
            mask = None
            part_probs = None
            if with_annotations:
                points = []
                for part in range(num_parts):
                    points.append(
                        Keypoint(
                            part=part,
                            x=float(rng.uniform(0, image_pixels)),
                            y=float(rng.uniform(0, image_pixels)),
                            visible=bool(rng.random() < 0.8),
                        )
                    )
                keypoints = KeypointSet(image_id, image_pixels, image_pixels, tuple(points))
                mask = rng.random(num_cells) < 0.7
                part_probs = PartProbGrid(
                    height, width, rng.uniform(size=(num_cells, num_parts)).astype(np.float32)
                )
            images[image_id] = ImageRecord(
                image_id, c, features, embedding, keypoints, mask, part_probs
            )

    attribute_bank = None
    class_attributes = None
    if with_attributes:
        attribute_bank = AttributeBank(
            weights=rng.normal(size=(num_attributes, channels)).astype(np.float32),
            biases=rng.normal(scale=0.1, size=num_attributes).astype(np.float32),
            names=tuple(f"attr_{t:03d}" for t in range(num_attributes)),
            parts=tuple(t % num_parts for t in range(num_attributes)),
        )
        class_attributes = rng.uniform(size=(num_classes, num_attributes))

    # Diagonal-dominant confusion counts; off-diagonal ties are resolved by
    # the selection op itself.
    confusion = rng.integers(0, 10, size=(num_classes, num_classes))
    confusion += np.diag(rng.integers(50, 80, size=num_classes))

    return Bundle(
        height=height,
        width=width,
        channels=channels,
        embedding_channels=embedding_channels,
        class_names=class_names,
        head=head,
        images=images,
        part_names=tuple(f"part_{p}" for p in range(num_parts)) if with_annotations else None,
        part_aliases={},
        attribute_bank=attribute_bank,
        class_attributes=class_attributes,
        confusion_matrix=confusion,
    )


PRESETS = {
    # Small fully annotated bundle used across the test suite.
    "mini": dict(
        height=4,
        width=4,
        channels=8,
        embedding_channels=6,
        num_classes=4,
        images_per_class=2,
        num_parts=5,
        num_attributes=10,
        seed=7,
    ),
    # Timing-scale bundle: one query plus five same-class distractors on a
    # 7x7 grid with a wide head, no annotations.
    "bench": dict(
        height=7,
        width=7,
        channels=512,
        embedding_channels=64,
        num_classes=200,
        images_per_class=0,  # replaced below
        seed=11,
    ),
}


def make_preset(name: str, seed: int | None = None) -> Bundle:
    """Instantiate a named preset (optionally overriding its seed)."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if name == "mini":
        params = dict(PRESETS["mini"])
        if seed is not None:
            params["seed"] = seed
        return make_bundle(**params)

    params = dict(PRESETS["bench"])
    if seed is not None:
        params["seed"] = seed
    rng_seed = params.pop("seed")
    params.pop("images_per_class")
    rng = np.random.default_rng(rng_seed)
    height, width = params["height"], params["width"]
    channels = params["channels"]
    emb = params["embedding_channels"]
    num_classes = params["num_classes"]
    num_cells = height * width
    class_names = tuple(f"class_{c:03d}" for c in range(num_classes))
    head = DecisionHead(
        "gap_linear",
        (
            (
                rng.normal(scale=1.0, size=(num_classes, channels)).astype(np.float32),
                rng.normal(scale=0.1, size=num_classes).astype(np.float32),
            ),
        ),
        class_names,
    )
    images: dict[str, ImageRecord] = {}
    # "query_000" sorts before the distractor ids, so it is the default
    # benchmark query.
    specs = [("query_000", 0)] + [(f"ref_{i:03d}", 1) for i in range(5)]
    for image_id, class_index in specs:
        images[image_id] = ImageRecord(
            image_id,
            class_index,
            FeatureGrid(height, width, channels, rng.normal(size=(num_cells, channels)).astype(np.float32)),
            EmbeddingGrid.normalized(height, width, rng.normal(size=(num_cells, emb))),
        )
    # Every class is most confused with class 1 (the distractor class), so
    # the benchmark resolves its target no matter what the head predicts.
    confusion = np.eye(num_classes, dtype=np.int64) * 50
    confusion[:, 1] += 25
    confusion[1, 1] = 50
    confusion[1, 2] = 25
    return Bundle(
        height=height,
        width=width,
        channels=channels,
        embedding_channels=emb,
        class_names=class_names,
        head=head,
        images=images,
        confusion_matrix=confusion,
    )
