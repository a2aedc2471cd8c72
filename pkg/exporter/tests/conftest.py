from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def write_images(root: Path, count: int, classes: list[str], seed: int = 0) -> Path:
    """Seeded random PNGs plus the manifest listing them."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(count):
        image_id = f"img_{index:03d}"
        pixels = rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
        path = root / f"{image_id}.png"
        Image.fromarray(pixels).save(path)
        entries.append(
            {"id": image_id, "path": str(path), "class": classes[index % len(classes)]}
        )
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"classes": classes, "images": entries}, indent=2))
    return manifest


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> Path:
    return write_images(tmp_path_factory.mktemp("toy"), 10, ["finch", "wren"], seed=1)


@pytest.fixture(scope="session")
def pair_manifest(tmp_path_factory) -> Path:
    return write_images(tmp_path_factory.mktemp("pair"), 2, ["finch", "wren"], seed=2)


@pytest.fixture(scope="session")
def wide_manifest(tmp_path_factory) -> Path:
    return write_images(tmp_path_factory.mktemp("wide"), 200, ["a", "b", "c", "d"], seed=3)
