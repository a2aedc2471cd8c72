"""Build and split torchvision classifiers into a spatial trunk and a head.

ResNets split after the last convolutional stage: the remaining global
average pool plus fully connected layer becomes a ``gap_linear`` head.
VGG-16 splits after its final max-pooling layer: the three classifier
linears become a ``flatten_mlp`` head, with the first weight matrix
permuted from torch's channel-major flattening to the bundle's
cell-major layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torchvision import models

BACKBONES = ("resnet18", "resnet50", "vgg16")


@dataclass
class SplitModel:
    """A trunk producing (N, C, H, W) maps plus the exported head weights."""

    name: str
    trunk: nn.Module
    head_kind: str
    head_layers: list[tuple[np.ndarray, np.ndarray]]
    full_model: nn.Module


def _build(name: str, weights: str | None, seed: int, num_classes: int) -> nn.Module:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; choose from {BACKBONES}")
    torch.manual_seed(seed)
    model = getattr(models, name)(weights=None, num_classes=num_classes)
    if weights is not None:
        state = torch.load(weights, map_location="cpu")
        model.load_state_dict(state)
    model.eval()
    return model


def _resnet_trunk(model: nn.Module) -> nn.Module:
    return nn.Sequential(
        model.conv1,
        model.bn1,
        model.relu,
        model.maxpool,
        model.layer1,
        model.layer2,
        model.layer3,
        model.layer4,
    )


def _vgg_head_layers(model: nn.Module, channels: int, cells: int) -> list:
    linears = [m for m in model.classifier if isinstance(m, nn.Linear)]
    layers = []
    for idx, linear in enumerate(linears):
        weight = linear.weight.detach().numpy().astype(np.float32)
        bias = linear.bias.detach().numpy().astype(np.float32)
        if idx == 0:
            # torch flattens (C, H, W) channel-major; the bundle layout is
            # cell-major, so reorder the input columns.
            out_dim = weight.shape[0]
            weight = (
                weight.reshape(out_dim, channels, cells)
                .transpose(0, 2, 1)
                .reshape(out_dim, cells * channels)
                .copy()
            )
        layers.append((weight, bias))
    return layers


def build_split(
    name: str, weights: str | None = None, seed: int = 0, num_classes: int = 1000
) -> SplitModel:
    """Instantiate a backbone with the given class count and split it at
    its documented point."""
    model = _build(name, weights, seed, num_classes)
    if name.startswith("resnet"):
        trunk = _resnet_trunk(model)
        head_layers = [
            (
                model.fc.weight.detach().numpy().astype(np.float32),
                model.fc.bias.detach().numpy().astype(np.float32),
            )
        ]
        return SplitModel(name, trunk, "gap_linear", head_layers, model)
    # vgg16: trunk ends at the final down-sampling max pool
    trunk = model.features
    channels = 512
    cells = 7 * 7
    return SplitModel(name, trunk, "flatten_mlp", _vgg_head_layers(model, channels, cells), model)


def build_aux_trunk(name: str, weights: str | None = None, seed: int = 1) -> nn.Module:
    """Spatial trunk of the auxiliary embedding model (pooling removed)."""
    model = _build(name, weights, seed, num_classes=1000)
    if name.startswith("resnet"):
        return _resnet_trunk(model)
    return model.features


def numpy_head_forward(split: SplitModel, cells: np.ndarray) -> np.ndarray:
    """Head logits recomputed from an exported cell matrix, in numpy.

    Independent consistency check for the export: must agree with the
    source model's own forward pass.
    """
    if split.head_kind == "gap_linear":
        weight, bias = split.head_layers[0]
        pooled = cells.astype(np.float64).mean(axis=0)
        return weight.astype(np.float64) @ pooled + bias.astype(np.float64)
    x = cells.astype(np.float64).reshape(-1)
    for idx, (weight, bias) in enumerate(split.head_layers):
        x = weight.astype(np.float64) @ x + bias.astype(np.float64)
        if idx < len(split.head_layers) - 1:
            x = np.maximum(x, 0.0)
    return x
