"""Export configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class ExportConfig:
    """One bundle export run.

    ``weights``/``aux_weights`` name local state_dict files; when None the
    model is built with a seeded random initialization (useful for tests
    and offline environments; the export pipeline is weight-agnostic).
    """

    image_manifest: str
    out: str
    backbone: str = "resnet50"
    weights: str | None = None
    aux_backbone: str = "resnet18"
    aux_weights: str | None = None
    seed: int = 0
    batch_size: int = 16
    expect_grid: tuple[int, int] | None = (7, 7)
    annotations: str | None = None
    attribute_bank: str | None = None
    class_attributes: str | None = None
    include_confusion: bool = False
    consistency_sample: int = 50

    @classmethod
    def from_json(cls, path: str | Path) -> "ExportConfig":
        raw = json.loads(Path(path).read_text())
        if "expect_grid" in raw and raw["expect_grid"] is not None:
            raw["expect_grid"] = tuple(raw["expect_grid"])
        return cls(**raw)

    def to_json(self) -> str:
        data = asdict(self)
        if data["expect_grid"] is not None:
            data["expect_grid"] = list(data["expect_grid"])
        return json.dumps(data, indent=2)


@dataclass
class ImageEntry:
    image_id: str
    path: str
    class_name: str


@dataclass
class ImageManifest:
    """Input listing: class vocabulary plus one entry per image."""

    classes: list[str]
    images: list[ImageEntry] = field(default_factory=list)

    @classmethod
    def from_json(cls, path: str | Path) -> "ImageManifest":
        raw = json.loads(Path(path).read_text())
        classes = [str(c) for c in raw["classes"]]
        images = [
            ImageEntry(str(e["id"]), str(e["path"]), str(e["class"]))
            for e in raw["images"]
        ]
        known = set(classes)
        for entry in images:
            if entry.class_name not in known:
                raise ValueError(f"image {entry.image_id!r} has unknown class {entry.class_name!r}")
        ids = [e.image_id for e in images]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in the manifest")
        return cls(classes, images)

    def class_index(self, name: str) -> int:
        return self.classes.index(name)
