"""Training loop: SGD with momentum, step-decayed learning rate, Dice
region+edge objective, and kernel-bank re-projection after every update.

The learning rate starts at ``base_lr`` and drops to 0.75x, 0.5x and 0.25x
of it at 5/12, 5/8 and 5/6 of the step budget. Those fractions keep the
decay shape of the full-scale schedule (0.01 -> 0.0075 / 0.005 / 0.0025 at
5K / 7.5K / 10K of 12K) at any desk-scale step count.
"""
from __future__ import annotations

import os

import numpy as np

from .autograd import Tensor, no_grad
from .datagen import read_manifest
from .losses import combined_loss
from .model import NedbModel, normalize_batch
from .morphology import edge_gt, structuring_element
from .ppm import read_mask, read_ppm

LR_FRACTIONS = (5 / 12, 5 / 8, 5 / 6)
LR_FACTORS = (0.75, 0.5, 0.25)
EDGE_POOL_FACTOR = 4
LOG_HEADER = "step,lr,loss_region,loss_edge,loss_total"


def lr_at(step: int, total_steps: int, base_lr: float = 0.01) -> float:
    """Learning rate for 0-based ``step`` of a ``total_steps`` run."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    lr = base_lr
    for fraction, factor in zip(LR_FRACTIONS, LR_FACTORS):
        if step >= int(total_steps * fraction):
            lr = base_lr * factor
    return lr


class SGD:
    """Plain momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def pool_edge_target(edge: np.ndarray, factor: int = EDGE_POOL_FACTOR) -> np.ndarray:
    """Max-pool a full-resolution boolean edge mask down by ``factor``.

    Max (not mean) keeps one-pixel-thin edges positive after pooling.
    """
    h, w = edge.shape
    if h % factor or w % factor:
        raise ValueError(f"edge shape {edge.shape} not divisible by {factor}")
    pooled = edge.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    return pooled.astype(np.float64)


class ForgeryDataset:
    """Manifest-backed (image, mask, edge) triples.

    Rows without an edge_path get their edge ground truth derived on the
    fly from the region mask with the given footprint.
    """

    def __init__(self, manifest_path, edge_shape: str = "ellipse", edge_size: int = 5):
        self.base = os.path.dirname(os.path.abspath(manifest_path))
        self.rows = read_manifest(manifest_path)
        if not self.rows:
            raise ValueError(f"{manifest_path}: manifest has no rows")
        self.se = structuring_element(edge_shape, edge_size)

    def __len__(self) -> int:
        return len(self.rows)

    def image_id(self, index: int) -> str:
        return os.path.splitext(os.path.basename(self.rows[index]["image_path"]))[0]

    def load(self, index: int):
        row = self.rows[index]
        image = read_ppm(os.path.join(self.base, row["image_path"]))
        mask = read_mask(os.path.join(self.base, row["mask_path"]))
        if mask.shape != image.shape[:2]:
            raise ValueError(f"row {index}: mask {mask.shape} does not match "
                             f"image {image.shape[:2]}")
        if row.get("edge_path"):
            edge = read_mask(os.path.join(self.base, row["edge_path"]))
        else:
            edge = edge_gt(mask, self.se)
        return image, mask, edge


class ArrayDataset:
    """In-memory (image, mask) pairs with derived edge ground truth; same
    interface as ForgeryDataset."""

    def __init__(self, images, masks, edge_shape: str = "ellipse", edge_size: int = 5):
        if len(images) != len(masks):
            raise ValueError(f"{len(images)} images but {len(masks)} masks")
        if not images:
            raise ValueError("dataset is empty")
        self.images = [np.asarray(im) for im in images]
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        for i, (im, m) in enumerate(zip(self.images, self.masks)):
            if im.ndim != 3 or im.shape[2] != 3:
                raise ValueError(f"item {i}: expected (H, W, 3) image, got {im.shape}")
            if m.shape != im.shape[:2]:
                raise ValueError(f"item {i}: mask {m.shape} does not match "
                                 f"image {im.shape[:2]}")
        self.se = structuring_element(edge_shape, edge_size)

    def __len__(self) -> int:
        return len(self.images)

    def image_id(self, index: int) -> str:
        return f"{index:05d}"

    def load(self, index: int):
        mask = self.masks[index]
        return self.images[index], mask, edge_gt(mask, self.se)


def _flip(arr: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        arr = arr[:, ::-1]
    if vertical:
        arr = arr[::-1, :]
    return arr


def _next_batch(dataset: ForgeryDataset, order: list, batch_size: int,
                rng: np.random.Generator, augment: bool):
    while len(order) < batch_size:
        order.extend(rng.permutation(len(dataset)).tolist())
    images, masks, edges = [], [], []
    for _ in range(batch_size):
        image, mask, edge = dataset.load(order.pop(0))
        if augment:
            hflip = bool(rng.random() < 0.5)
            vflip = bool(rng.random() < 0.5)
            image = _flip(image, hflip, vflip)
            mask = _flip(mask, hflip, vflip)
            edge = _flip(edge, hflip, vflip)
        images.append(np.ascontiguousarray(image))
        masks.append(np.ascontiguousarray(mask))
        edges.append(pool_edge_target(np.ascontiguousarray(edge)))
    mask_gt = Tensor(np.stack(masks).astype(np.float64)[:, None])
    edge_gt_t = Tensor(np.stack(edges)[:, None])
    return normalize_batch(images), mask_gt, edge_gt_t


def train_model(model: NedbModel, dataset: ForgeryDataset, *, steps: int,
                batch_size: int = 4, base_lr: float = 0.01, momentum: float = 0.9,
                alpha: float = 0.3, seed: int = 0, augment: bool = True,
                log_path=None, invariant_every: int = 10, progress=None):
    """Run ``steps`` optimizer updates; returns the loss-log rows.

    Each row is (step, lr, loss_region, loss_edge, loss_total); the edge
    column is nan for edge-free models. The kernel bank is re-projected
    after every update and its invariants re-checked every
    ``invariant_every`` steps.
    """
    if steps <= 0:
        raise ValueError(f"steps must be positive, got {steps}")
    model.train()
    params = [p for _, p in model.named_parameters()]
    opt = SGD(params, lr=base_lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    order: list = []
    rows = []
    for step in range(steps):
        opt.lr = lr_at(step, steps, base_lr)
        images, mask_gt, edge_t = _next_batch(dataset, order, batch_size, rng, augment)
        mask_pred, edge_pred = model.forward(images)
        total, region, edge = combined_loss(
            mask_pred, mask_gt, edge_pred, edge_t if edge_pred is not None else None,
            alpha)
        opt.zero_grad()
        total.backward()
        opt.step()
        model.project_bank()
        if model.bank is not None and (step + 1) % invariant_every == 0:
            model.bank.check_invariants()
        rows.append((step, opt.lr, region.data.item(),
                     edge.data.item() if edge is not None else float("nan"),
                     total.data.item()))
        if progress is not None:
            progress(rows[-1])
    if log_path is not None:
        write_loss_log(log_path, rows)
    return rows


def write_loss_log(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for step, lr, region, edge, total in rows:
            fh.write(f"{step},{lr:.6f},{region:.6f},{edge:.6f},{total:.6f}\n")


def predict(model: NedbModel, image: np.ndarray):
    """Single-image inference; returns (mask_prob, edge_prob_or_None) arrays."""
    model.eval()
    with no_grad():
        mask, edge = model.forward(normalize_batch([image]))
    return mask.data[0, 0], (edge.data[0, 0] if edge is not None else None)
