"""Optional training utilities: the cell-level parts detector and the
linear part-attribute classifiers whose outputs feed bundle exports.

Both follow the same schedule family: SGD with momentum 0.9 and a x0.1
learning-rate decay at 70% and 90% of the epochs.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ImageManifest
from .extract import load_batch, spatial_maps
from .models import build_aux_trunk, build_split


def project_points_to_cells(points, image_width, image_height, h, w) -> list[set[int]]:
    """Visible keypoints into h x w cells (floor mapping, clamped)."""
    cells: list[set[int]] = [set() for _ in range(h * w)]
    for pt in points:
        if not pt.get("visible", True):
            continue
        row = min(h - 1, max(0, math.floor(float(pt["y"]) * h / image_height)))
        col = min(w - 1, max(0, math.floor(float(pt["x"]) * w / image_width)))
        cells[row * w + col].add(int(pt["part"]))
    return cells


class PartsDetector(nn.Module):
    """Backbone trunk plus a 1x1 convolution emitting per-cell part logits."""

    def __init__(self, backbone: str, num_parts: int, seed: int = 0):
        super().__init__()
        self.trunk = build_aux_trunk(backbone, seed=seed)
        with torch.no_grad():
            probe = self.trunk(torch.zeros(1, 3, 224, 224))
        self.head = nn.Conv2d(probe.shape[1], num_parts, kernel_size=1)

    def forward(self, x):
        return self.head(self.trunk(x))


def _soft_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # logits/target: (cells, parts); rows of target sum to 1
    return -(target * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def _schedule(optimizer, epoch: int, epochs: int, lr: float) -> None:
    scale = 1.0
    if epoch >= math.floor(0.9 * epochs):
        scale = 0.01
    elif epoch >= math.floor(0.7 * epochs):
        scale = 0.1
    for group in optimizer.param_groups:
        group["lr"] = lr * scale


def train_parts_detector(
    image_manifest: str | Path,
    keypoints_path: str | Path,
    out_annotations: str | Path,
    backbone: str = "resnet18",
    epochs: int = 50,
    lr: float = 0.001,
    batch_size: int = 8,
    seed: int = 0,
    out_weights: str | Path | None = None,
) -> Path:
    """Train the detector and write per-image part probability grids.

    The loss is a soft cross-entropy over the parts present in a cell,
    applied only to cells containing at least one keypoint. The output
    annotations JSON slots directly into an export via ``annotations``.
    """
    manifest = ImageManifest.from_json(image_manifest)
    keypoint_data = json.loads(Path(keypoints_path).read_text())["images"]
    entries = [e for e in manifest.images if e.image_id in keypoint_data]
    if not entries:
        raise ValueError("no manifest image has keypoint annotations")
    num_parts = (
        max(
            int(pt["part"])
            for image in keypoint_data.values()
            for pt in image["keypoints"]["points"]
        )
        + 1
    )
    torch.manual_seed(seed)
    model = PartsDetector(backbone, num_parts, seed=seed)
    with torch.no_grad():
        probe = model(torch.zeros(1, 3, 224, 224))
    h, w = int(probe.shape[2]), int(probe.shape[3])

    targets = {}
    for entry in entries:
        kps = keypoint_data[entry.image_id]["keypoints"]
        cells = project_points_to_cells(
            kps["points"], kps["image_width"], kps["image_height"], h, w
        )
        grid = torch.zeros(h * w, num_parts)
        for cell, parts in enumerate(cells):
            for part in parts:
                grid[cell, part] = 1.0 / len(parts)
        targets[entry.image_id] = grid

    optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=1e-4)
    model.train()
    for epoch in range(epochs):
        _schedule(optimizer, epoch, epochs, lr)
        for start in range(0, len(entries), batch_size):
            chunk = entries[start : start + batch_size]
            batch = load_batch([e.path for e in chunk])
            logits = model(batch)
            cells = logits.permute(0, 2, 3, 1).reshape(len(chunk), h * w, num_parts)
            loss = torch.zeros(())
            counted = 0
            for idx, entry in enumerate(chunk):
                target = targets[entry.image_id]
                labeled = target.sum(dim=1) > 0
                if labeled.any():
                    loss = loss + _soft_cross_entropy(cells[idx][labeled], target[labeled])
                    counted += 1
            if counted:
                optimizer.zero_grad()
                (loss / counted).backward()
                optimizer.step()

    model.eval()
    annotations = {"images": {}}
    for start in range(0, len(entries), batch_size):
        chunk = entries[start : start + batch_size]
        batch = load_batch([e.path for e in chunk])
        with torch.no_grad():
            probs = torch.softmax(model(batch), dim=1)
        for idx, entry in enumerate(chunk):
            grid = probs[idx].reshape(num_parts, h * w).T
            annotations["images"][entry.image_id] = {
                "part_probs": [[float(v) for v in row] for row in grid]
            }
    out_path = Path(out_annotations)
    out_path.write_text(json.dumps(annotations, indent=2) + "\n")
    if out_weights is not None:
        torch.save(model.state_dict(), out_weights)
    return out_path


def train_attribute_classifiers(
    image_manifest: str | Path,
    attributes_path: str | Path,
    out_bank: str | Path,
    backbone: str = "resnet50",
    epochs: int = 100,
    lr: float = 0.04,
    batch_size: int = 64,
    weight_decay: float = 1e-6,
    seed: int = 0,
) -> Path:
    """Linear multi-label probes on the pooled trunk features.

    ``attributes_path`` is an npz with ``class_attributes`` (C x T raw
    frequencies), ``names`` (T), and ``parts`` (T). Per-image labels are
    the denoised (majority) attributes of the image's class. The trunk is
    frozen; only the linear layer trains. Output: an npz bank consumable
    by an export's ``attribute_bank``.
    """
    manifest = ImageManifest.from_json(image_manifest)
    if not manifest.images:
        raise ValueError("image manifest lists no images")
    archive = np.load(attributes_path, allow_pickle=False)
    class_attributes = archive["class_attributes"]
    names = [str(n) for n in archive["names"]]
    parts = [int(p) for p in archive["parts"]]
    denoised = (class_attributes > 0.5).astype(np.float32)
    num_attrs = denoised.shape[1]

    split = build_split(backbone, seed=seed, num_classes=len(manifest.classes))
    pooled = []
    labels = []
    for start in range(0, len(manifest.images), 16):
        chunk = manifest.images[start : start + 16]
        maps = spatial_maps(split.trunk, load_batch([e.path for e in chunk]))
        pooled.append(maps.mean(dim=(2, 3)))
        labels += [denoised[manifest.class_index(e.class_name)] for e in chunk]
    features = torch.cat(pooled).detach()
    target = torch.from_numpy(np.stack(labels))

    torch.manual_seed(seed)
    linear = nn.Linear(features.shape[1], num_attrs)
    optimizer = torch.optim.SGD(
        linear.parameters(), lr=lr, momentum=0.9, weight_decay=weight_decay
    )
    criterion = nn.BCEWithLogitsLoss()
    order = np.arange(len(features))
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        _schedule(optimizer, epoch, epochs, lr)
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start : start + batch_size].copy())
            optimizer.zero_grad()
            loss = criterion(linear(features[idx]), target[idx])
            loss.backward()
            optimizer.step()

    out_path = Path(out_bank)
    np.savez(
        out_path,
        weights=linear.weight.detach().numpy().astype(np.float32),
        biases=linear.bias.detach().numpy().astype(np.float32),
        names=np.array(names),
        parts=np.array(parts, dtype=np.int64),
    )
    return out_path
