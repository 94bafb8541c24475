"""Binary morphology for edge ground truth.

The edge ground truth of a tampered-region mask is the ring between its
dilation and its erosion. Outside-image pixels count as background for both
operations, so a full-canvas mask erodes away at the border and dilation
never grows past the canvas.

The elliptical footprint follows the row-wise half-width rule of the common
imaging tools: for row offset dy, columns within round(c * sqrt(1 -
(dy/r)^2)) of the center are set. This reproduces the conventional shapes
(k=3 equals the cross; k=5 has single-pixel top and bottom rows), which a
direct evaluation of the ellipse inequality at cell centers does not.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SHAPES = ("rect", "cross", "ellipse")
DEFAULT_SHAPE = "ellipse"
DEFAULT_SIZE = 5


def structuring_element(shape: str, k: int) -> np.ndarray:
    """Boolean k x k footprint; the center is always included."""
    if shape not in SHAPES:
        raise ValueError(f"unknown footprint shape {shape!r}; expected one of {SHAPES}")
    if k % 2 == 0 or k < 1:
        raise ValueError(f"footprint size must be odd and positive, got {k}")
    c = k // 2
    if shape == "rect":
        return np.ones((k, k), dtype=bool)
    if shape == "cross":
        se = np.zeros((k, k), dtype=bool)
        se[c, :] = True
        se[:, c] = True
        return se
    se = np.zeros((k, k), dtype=bool)
    r = c
    for i in range(k):
        dy = i - r
        if r == 0:
            dx = 0
        else:
            dx = int(np.round(c * np.sqrt(max(r * r - dy * dy, 0) / (r * r))))
        se[i, c - dx:c + dx + 1] = True
    return se


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _windows(mask: np.ndarray, k: int, fill: bool) -> np.ndarray:
    pad = k // 2
    padded = np.pad(mask, pad, constant_values=fill)
    return sliding_window_view(padded, (k, k))


def dilate(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    mask = _check_mask(mask)
    k = se.shape[0]
    win = _windows(mask, k, fill=False)
    # reflected footprint; all provided shapes are symmetric but the
    # Minkowski definition calls for it
    return np.any(win & se[::-1, ::-1], axis=(2, 3))


def erode(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    mask = _check_mask(mask)
    k = se.shape[0]
    win = _windows(mask, k, fill=False)
    return np.all(win[:, :, se], axis=2)


def edge_gt(mask: np.ndarray, se: np.ndarray | None = None) -> np.ndarray:
    """Dilation minus erosion: the boundary band of the mask."""
    if se is None:
        se = structuring_element(DEFAULT_SHAPE, DEFAULT_SIZE)
    return dilate(mask, se) & ~erode(mask, se)
