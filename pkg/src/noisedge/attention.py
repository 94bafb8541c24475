"""Spatial self-attention with an optional Euclidean-distance prior.

Correlation between every pixel pair is computed from reduced query/key
projections, optionally divided elementwise by (distance + 1) so far-apart
pixels attend to each other less, then row-softmaxed into attention weights.
Division by distance+1 shrinks logits toward zero, which helps positively
correlated near pairs and (deliberately) also damps negative correlations
less at short range; both directions are property-tested.

A brute-force per-pixel oracle is included for verifying the vectorized
forward path.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor
from .blocks import Conv2d, Module

MAX_PIXELS = 4096

_DISTANCE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def build_distance_matrix(h: int, w: int, max_pixels: int = MAX_PIXELS) -> np.ndarray:
    """(H*W, H*W) matrix of Euclidean pixel distances plus 1, cached per size.

    The +1 keeps the later division well-defined at zero distance (diagonal).
    """
    if h < 1 or w < 1:
        raise ValueError(f"feature size must be positive, got {h}x{w}")
    if h * w > max_pixels:
        raise ValueError(
            f"distance matrix for {h}x{w} needs ({h * w})^2 entries, over the "
            f"{max_pixels}-pixel cap; reduce the feature size or raise the cap")
    key = (h, w)
    mat = _DISTANCE_CACHE.get(key)
    if mat is None:
        rows, cols = np.divmod(np.arange(h * w), w)
        dr = rows[:, None] - rows[None, :]
        dc = cols[:, None] - cols[None, :]
        mat = np.hypot(dr, dc) + 1.0
        mat.setflags(write=False)
        _DISTANCE_CACHE[key] = mat
    return mat


class DistanceNonLocal(Module):
    """Non-local block; ``use_distance`` switches the distance prior on."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 use_distance: bool = True, max_pixels: int = MAX_PIXELS):
        super().__init__()
        if channels % 8 != 0:
            raise ValueError(f"channel count must be divisible by 8, got {channels}")
        self.channels = channels
        self.reduced = channels // 8
        self.use_distance = use_distance
        self.max_pixels = max_pixels
        self.query = Conv2d(channels, self.reduced, 1, rng, bias=False)
        self.key = Conv2d(channels, self.reduced, 1, rng, bias=False)
        self.value = Conv2d(channels, channels, 1, rng, bias=False)
        self.proj = Conv2d(channels, channels, 1, rng, bias=False)

    def _flatten(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        return ops.reshape(t, (n, c, h * w))

    def attention_map(self, x: Tensor) -> Tensor:
        """(N, HW, HW) row-stochastic attention; row i = weights of query pixel i."""
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        q = self._flatten(self.query(x))          # (N, C/8, HW)
        k = self._flatten(self.key(x))
        scale = 1.0 / np.sqrt(self.reduced)
        cor = ops.mul(ops.matmul(ops.swap_last_axes(q), k), scale)
        if self.use_distance:
            d = build_distance_matrix(h, w, self.max_pixels)
            cor = ops.div(cor, Tensor(d.astype(x.dtype)))
        return ops.softmax_rows(cor)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        attn = self.attention_map(x)
        v = self._flatten(self.value(x))          # (N, C, HW)
        mixed = ops.matmul(v, ops.swap_last_axes(attn))
        out = self.proj(ops.reshape(mixed, (n, c, h, w)))
        return ops.add(x, out)


def brute_force_nonlocal(x: np.ndarray, wq: np.ndarray, wk: np.ndarray,
                         wv: np.ndarray, wproj: np.ndarray,
                         use_distance: bool = False) -> np.ndarray:
    """Per-pixel O((HW)^2) reference for the vectorized forward.

    Weight arrays are the 1x1 kernels as plain matrices: wq, wk are
    (C/8, C); wv, wproj are (C, C).
    """
    n, c, h, w = x.shape
    hw = h * w
    scale = 1.0 / np.sqrt(wq.shape[0])
    d = build_distance_matrix(h, w) if use_distance else None
    out = np.empty_like(x)
    for b in range(n):
        feats = x[b].reshape(c, hw)
        q = wq @ feats
        k = wk @ feats
        v = wv @ feats
        mixed = np.zeros((c, hw))
        for i in range(hw):
            logits = np.empty(hw)
            for j in range(hw):
                logits[j] = scale * float(q[:, i] @ k[:, j])
                if use_distance:
                    logits[j] /= d[i, j]
            logits -= logits.max()
            weights = np.exp(logits)
            weights /= weights.sum()
            for j in range(hw):
                mixed[:, i] += weights[j] * v[:, j]
        out[b] = (x[b].reshape(c, hw) + wproj @ mixed).reshape(c, h, w)
    return out
