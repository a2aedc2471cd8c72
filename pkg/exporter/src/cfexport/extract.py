"""Batched image loading and spatial feature extraction."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F
from torchvision import transforms

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TRANSFORM = transforms.Compose(
    [
        transforms.Resize((224, 224)),
        transforms.ToTensor(),
        transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
    ]
)


def load_batch(paths: Sequence[str | Path]) -> torch.Tensor:
    tensors = []
    for path in paths:
        with Image.open(path) as img:
            tensors.append(TRANSFORM(img.convert("RGB")))
    return torch.stack(tensors)


def spatial_maps(trunk: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Run the trunk in inference mode; returns (N, C, H, W)."""
    with torch.no_grad():
        out = trunk(batch)
    if out.ndim != 4:
        raise ValueError(f"trunk emitted shape {tuple(out.shape)}, expected a spatial map")
    return out


def resample_maps(maps: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resample to the feature grid size."""
    if maps.shape[-2:] == (height, width):
        return maps
    return F.interpolate(maps, size=(height, width), mode="bilinear", align_corners=False)


def to_cell_matrix(spatial: torch.Tensor) -> np.ndarray:
    """(C, H, W) map to the bundle's cell-major (H*W, C) float32 matrix."""
    channels = spatial.shape[0]
    return (
        spatial.detach().numpy().astype(np.float32).reshape(channels, -1).T.copy()
    )
