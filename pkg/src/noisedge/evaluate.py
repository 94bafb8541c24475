"""Checkpoint evaluation: per-image metrics against manifest ground truth,
with optional overlay images showing the thresholded prediction in red."""
from __future__ import annotations

import os

import numpy as np

from .metrics import MetricReport
from .model import NedbModel
from .ppm import write_ppm
from .training import ForgeryDataset, predict

OVERLAY_TINT = np.array([255.0, 0.0, 0.0])


def overlay_image(image: np.ndarray, pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Blend the input toward red wherever the prediction crosses threshold."""
    if pred.shape != image.shape[:2]:
        raise ValueError(f"prediction {pred.shape} does not match image {image.shape[:2]}")
    out = image.astype(np.float64).copy()
    hot = pred >= threshold
    out[hot] = 0.5 * out[hot] + 0.5 * OVERLAY_TINT
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def evaluate_model(model: NedbModel, dataset: ForgeryDataset, *,
                   threshold: float = 0.5, aggregate: str = "per-image",
                   overlay_dir=None) -> MetricReport:
    """Run the model over every manifest row; returns the filled report."""
    report = MetricReport(threshold=threshold, aggregate=aggregate)
    if overlay_dir is not None:
        os.makedirs(overlay_dir, exist_ok=True)
    for i in range(len(dataset)):
        image, mask, _ = dataset.load(i)
        pred, _ = predict(model, image)
        image_id = dataset.image_id(i)
        report.add(image_id, pred, mask)
        if overlay_dir is not None:
            write_ppm(os.path.join(overlay_dir, f"{image_id}.ppm"),
                      overlay_image(image, pred, threshold))
    return report


def mean_f1(model: NedbModel, dataset: ForgeryDataset, threshold: float = 0.5) -> float:
    report = evaluate_model(model, dataset, threshold=threshold)
    return report.mean_row()[2]
