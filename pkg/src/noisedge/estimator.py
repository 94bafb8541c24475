"""Estimator-style wrappers: fit/transform/predict objects that plug into
scikit-learn pipelines and model-selection utilities.

``X`` is a sequence of (H, W, 3) uint8 RGB images, all the same square
size; ``y`` a matching sequence of boolean region masks.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autograd import Tensor, no_grad
from .constrained import ConstrainedKernelBank
from .metrics import prf1
from .model import ModelConfig, NedbModel, normalize_batch
from .training import ArrayDataset, predict, train_model


def check_image_batch(X, input_size: int | None = None) -> list:
    """Validate a sequence of images; returns them as arrays."""
    images = [np.asarray(im) for im in X]
    if not images:
        raise ValueError("X is empty")
    for i, im in enumerate(images):
        if im.ndim != 3 or im.shape[2] != 3:
            raise ValueError(f"X[{i}]: expected (H, W, 3) image, got {im.shape}")
        if im.shape[0] != im.shape[1]:
            raise ValueError(f"X[{i}]: expected a square image, got {im.shape[:2]}")
        if input_size is not None and im.shape[0] != input_size:
            raise ValueError(f"X[{i}]: expected {input_size} x {input_size} "
                             f"images, got {im.shape[:2]}")
        if im.shape[:2] != images[0].shape[:2]:
            raise ValueError(f"X[{i}]: size {im.shape[:2]} differs from "
                             f"X[0] {images[0].shape[:2]}")
    return images


def check_mask_batch(y, images) -> list:
    masks = [np.asarray(m, dtype=bool) for m in y]
    if len(masks) != len(images):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    for i, (m, im) in enumerate(zip(masks, images)):
        if m.shape != im.shape[:2]:
            raise ValueError(f"y[{i}]: mask {m.shape} does not match "
                             f"image {im.shape[:2]}")
    return masks


class NoiseResidualExtractor(TransformerMixin, BaseEstimator):
    """High-pass noise residuals from a projected constrained kernel bank.

    ``transform`` returns an (N, 3, H, W) float array of residuals computed
    on the standardized input planes. Stateless apart from the bank built
    in ``fit``, so fit ignores ``y``.
    """

    def __init__(self, kernel_size: int = 5, scheme: str = "laplace-like-d",
                 mode: str = "improved", seed: int = 0):
        self.kernel_size = kernel_size
        self.scheme = scheme
        self.mode = mode
        self.seed = seed

    def fit(self, X, y=None):
        check_image_batch(X)
        self.bank_ = ConstrainedKernelBank(kernel_size=self.kernel_size,
                                           scheme=self.scheme, mode=self.mode,
                                           seed=self.seed)
        self.bank_.project()
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "bank_"):
            raise NotFittedError("call fit before transform")
        images = check_image_batch(X)
        with no_grad():
            residual = self.bank_.extract_noise(normalize_batch(images))
        return residual.data


class ManipulationDetector(BaseEstimator):
    """Trainable region detector with the scikit-learn fit/predict surface."""

    def __init__(self, base_width: int = 8, input_size: int = 64,
                 kernel_size: int = 5, scheme: str = "laplace-like-d",
                 dual_branch: bool = True, nonlocal_mode: str = "distance",
                 use_edge: bool = True, alpha: float = 0.3, steps: int = 50,
                 batch_size: int = 4, base_lr: float = 0.01,
                 momentum: float = 0.9, augment: bool = True,
                 threshold: float = 0.5, seed: int = 0):
        self.base_width = base_width
        self.input_size = input_size
        self.kernel_size = kernel_size
        self.scheme = scheme
        self.dual_branch = dual_branch
        self.nonlocal_mode = nonlocal_mode
        self.use_edge = use_edge
        self.alpha = alpha
        self.steps = steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.momentum = momentum
        self.augment = augment
        self.threshold = threshold
        self.seed = seed

    def _config(self) -> ModelConfig:
        return ModelConfig(base_width=self.base_width, input_size=self.input_size,
                           kernel_size=self.kernel_size, scheme=self.scheme,
                           dual_branch=self.dual_branch,
                           nonlocal_mode=self.nonlocal_mode,
                           use_edge=self.use_edge, alpha=self.alpha,
                           seed=self.seed)

    def fit(self, X, y):
        images = check_image_batch(X, self.input_size)
        masks = check_mask_batch(y, images)
        self.model_ = NedbModel(self._config())
        dataset = ArrayDataset(images, masks)
        self.loss_log_ = train_model(self.model_, dataset, steps=self.steps,
                                     batch_size=self.batch_size,
                                     base_lr=self.base_lr, momentum=self.momentum,
                                     alpha=self.alpha, seed=self.seed,
                                     augment=self.augment)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")

    def predict_proba(self, X) -> np.ndarray:
        """(N, H, W) tamper probabilities."""
        self._check_fitted()
        images = check_image_batch(X, self.input_size)
        return np.stack([predict(self.model_, im)[0] for im in images])

    def predict(self, X) -> np.ndarray:
        """(N, H, W) boolean masks at the configured threshold."""
        return self.predict_proba(X) >= self.threshold

    def score(self, X, y) -> float:
        """Mean per-image F1 against the reference masks."""
        probs = self.predict_proba(X)
        masks = check_mask_batch(y, check_image_batch(X, self.input_size))
        scores = [prf1(p, m, self.threshold)[2] for p, m in zip(probs, masks)]
        return float(np.mean(scores))
