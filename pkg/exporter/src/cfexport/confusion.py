"""Confusion matrices from classifier predictions."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .extract import load_batch


def predict_classes(model: nn.Module, paths: Sequence[str], batch_size: int = 16) -> np.ndarray:
    """Predicted class index per image path."""
    model.eval()
    out = []
    for start in range(0, len(paths), batch_size):
        batch = load_batch(paths[start : start + batch_size])
        with torch.no_grad():
            logits = model(batch)
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion_from_predictions(
    true_classes: np.ndarray, predicted_classes: np.ndarray, num_classes: int
) -> np.ndarray:
    """Counts matrix with rows = true class, columns = predicted class."""
    truth = np.asarray(true_classes, dtype=np.int64)
    pred = np.asarray(predicted_classes, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ValueError("true and predicted class arrays must align")
    if truth.size == 0:
        raise ValueError("no predictions to tally")
    for arr, what in ((truth, "true"), (pred, "predicted")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{what} class index out of range for {num_classes} classes")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (truth, pred), 1)
    return matrix
