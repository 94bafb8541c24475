"""Constrained high-pass kernels that turn an RGB image into a noise image.

A bank holds one k x k kernel per channel (channel i of the noise comes from
channel i of the image; a dense 3-to-3 mapping is available as an option).
Kernels are zero-sum: the center weight balances the non-center weights, so
constant image regions produce zero response and only local prediction error
(noise) survives.

Two projection rules are provided. ``improved`` is the stable one: zero the
center, divide non-center weights by the sum of their absolute values, clamp
everything at or below 0.001 up to 0.001, then set the center to minus the
post-clamp non-center sum so the kernel stays exactly zero-sum. A
``strict_center`` switch instead writes minus the pre-division absolute sum
into the center, which follows the published procedure to the letter but
gives up the exact zero-sum property. ``original`` divides by the signed
non-center sum and pins the center at -1; when that sum is near zero the
division blows the weights up (possibly flipping signs), which is exactly
the failure mode the improved rule removes, so it is kept for ablations.
"""
from __future__ import annotations

import logging

import numpy as np

from . import ops
from .autograd import Tensor

log = logging.getLogger(__name__)

SCHEMES = ("random", "random-sum", "laplace-like", "laplace-like-d")
MODES = ("original", "improved")
CLAMP_FLOOR = 0.001
VALID_SIZES = (3, 5, 7, 9, 11)


def _check_odd(k: int) -> None:
    if k % 2 == 0 or k < 3:
        raise ValueError(f"kernel size must be odd and >= 3, got {k}")


def init_laplace_like(k: int) -> np.ndarray:
    """Center -1, every other position 1/(k^2 - 1)."""
    _check_odd(k)
    w = np.full((k, k), 1.0 / (k * k - 1), dtype=np.float64)
    w[k // 2, k // 2] = -1.0
    return w


def init_laplace_like_d(k: int) -> np.ndarray:
    """Center -1, non-center weight x/d with x chosen so the weights sum to 1.

    d is the Euclidean distance to the center, so nearer positions weigh
    more. For k=3 this gives x = 1/(4 + 4/sqrt(2)) = 0.146447.
    """
    _check_odd(k)
    c = k // 2
    rows, cols = np.mgrid[0:k, 0:k]
    d = np.hypot(rows - c, cols - c)
    d[c, c] = 1.0          # placeholder; center is overwritten below
    inv = 1.0 / d
    inv[c, c] = 0.0
    w = inv / inv.sum()
    w[c, c] = -1.0
    return w


def init_random(k: int, rng: np.random.Generator) -> np.ndarray:
    """Center -1, others uniform on (0, 1)."""
    _check_odd(k)
    w = rng.uniform(0.0, 1.0, size=(k, k))
    w[k // 2, k // 2] = -1.0
    return w


def init_random_sum(k: int, rng: np.random.Generator) -> np.ndarray:
    """Like init_random but non-center weights normalized to sum 1."""
    w = init_random(k, rng)
    c = k // 2
    center = w[c, c]
    w[c, c] = 0.0
    w /= w.sum()
    w[c, c] = center
    return w


_INIT_FNS = {
    "random": lambda k, rng: init_random(k, rng),
    "random-sum": lambda k, rng: init_random_sum(k, rng),
    "laplace-like": lambda k, rng: init_laplace_like(k),
    "laplace-like-d": lambda k, rng: init_laplace_like_d(k),
}


def _noncenter_mask(k: int) -> np.ndarray:
    m = np.ones((k, k), dtype=bool)
    m[k // 2, k // 2] = False
    return m


def project_improved(kernels: np.ndarray, strict_center: bool = False,
                     reinit=None) -> np.ndarray:
    """Stable post-step projection, applied in place to (..., k, k) kernels.

    ``reinit`` is called as reinit() -> (k, k) array when a kernel's
    non-center weights are all zero and nothing can be normalized.
    """
    k = kernels.shape[-1]
    c = k // 2
    flat = kernels.reshape(-1, k, k)
    mask = _noncenter_mask(k)
    for idx in range(flat.shape[0]):
        w = flat[idx]
        w[c, c] = 0.0
        s = np.abs(w[mask]).sum()
        if s == 0.0:
            if reinit is None:
                raise ValueError("degenerate kernel: all non-center weights zero")
            log.warning("kernel %d degenerate (all non-center weights zero); reinitialized", idx)
            w[...] = reinit()
            continue
        w /= s
        low = mask & (w <= CLAMP_FLOOR)
        w[low] = CLAMP_FLOOR
        w[c, c] = -s if strict_center else -w[mask].sum()
    return kernels


def project_original(kernels: np.ndarray) -> np.ndarray:
    """Published first-version constraint: divide by the signed non-center
    sum, center -1. Unstable when the signed sum is near zero."""
    k = kernels.shape[-1]
    c = k // 2
    flat = kernels.reshape(-1, k, k)
    mask = _noncenter_mask(k)
    for idx in range(flat.shape[0]):
        w = flat[idx]
        s = w[mask].sum()
        if s == 0.0:
            log.warning("kernel %d non-center sum is exactly zero; division skipped", idx)
        else:
            w[mask] /= s
        w[c, c] = -1.0
    return kernels


class ConstrainedKernelBank:
    """Learnable high-pass kernels plus their projection bookkeeping.

    The weight tensor has conv2d layout: (3, 1, k, k) with groups=3 for the
    default per-channel mapping, (3, 3, k, k) with groups=1 for dense.
    Projection mutates weight.data in place (it is a constraint step, not a
    differentiated op).
    """

    def __init__(self, kernel_size: int = 5, scheme: str = "laplace-like-d",
                 mode: str = "improved", seed: int = 0, dense: bool = False,
                 strict_center: bool = False, channels: int = 3):
        _check_odd(kernel_size)
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.kernel_size = kernel_size
        self.scheme = scheme
        self.mode = mode
        self.seed = seed
        self.dense = dense
        self.strict_center = strict_center
        self.channels = channels
        self._rng = np.random.default_rng(seed)
        in_per_group = channels if dense else 1
        stack = np.stack([self._init_one()
                          for _ in range(channels * in_per_group)])
        self.weight = Tensor(stack.reshape(channels, in_per_group,
                                           kernel_size, kernel_size),
                             requires_grad=True)

    def _init_one(self) -> np.ndarray:
        return _INIT_FNS[self.scheme](self.kernel_size, self._rng)

    @property
    def groups(self) -> int:
        return 1 if self.dense else self.channels

    @property
    def n_kernels(self) -> int:
        return self.weight.data.shape[0] * self.weight.data.shape[1]

    def kernels(self) -> np.ndarray:
        """View of the weights as (K, k, k)."""
        k = self.kernel_size
        return self.weight.data.reshape(-1, k, k)

    def project(self) -> None:
        if self.mode == "improved":
            project_improved(self.weight.data, strict_center=self.strict_center,
                             reinit=self._init_one)
        else:
            project_original(self.weight.data)

    def check_invariants(self, tol: float = 1e-12) -> None:
        """Raise if the improved-mode constraints do not hold."""
        if self.mode != "improved":
            return
        k = self.kernel_size
        c = k // 2
        mask = _noncenter_mask(k)
        for idx, w in enumerate(self.kernels()):
            lo = w[mask].min()
            if lo < CLAMP_FLOOR:
                raise AssertionError(f"kernel {idx}: non-center weight {lo} below {CLAMP_FLOOR}")
            if not self.strict_center:
                total = abs(w.sum())
                if total > tol:
                    raise AssertionError(f"kernel {idx}: sum {total} exceeds {tol}")
                if abs(w[c, c] + w[mask].sum()) > tol:
                    raise AssertionError(f"kernel {idx}: center does not balance non-center sum")

    def extract_noise(self, image: Tensor) -> Tensor:
        """Same-padded stride-1 convolution; output shape equals input shape."""
        if image.data.ndim != 4 or image.shape[1] != self.channels:
            raise ValueError(f"expected N x {self.channels} x H x W input, got {image.shape}")
        return ops.conv2d(image, self.weight, stride=1,
                          padding=self.kernel_size // 2, groups=self.groups)

    # ---- plain-text serialization --------------------------------------

    def save(self, path) -> None:
        k = self.kernel_size
        lines = [f"{k} {self.n_kernels} {self.scheme} {self.mode}"]
        for w in self.kernels():
            lines.append("")
            for row in w:
                lines.append(" ".join(f"{v:.17g}" for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ConstrainedKernelBank":
        with open(path) as fh:
            raw = [ln.strip() for ln in fh]
        lines = [ln for ln in raw if ln]
        if not lines:
            raise ValueError(f"{path}: empty kernel bank file")
        head = lines[0].split()
        if len(head) != 4:
            raise ValueError(f"{path}: header must be 'k K scheme mode', got {lines[0]!r}")
        k, n = int(head[0]), int(head[1])
        scheme, mode = head[2], head[3]
        _check_odd(k)
        if len(lines) != 1 + n * k:
            raise ValueError(f"{path}: expected {n * k} weight rows, found {len(lines) - 1}")
        rows = []
        for ln in lines[1:]:
            vals = [float(v) for v in ln.split()]
            if len(vals) != k:
                raise ValueError(f"{path}: row has {len(vals)} values, expected {k}")
            rows.append(vals)
        kernels = np.array(rows).reshape(n, k, k)
        if n % 3 == 0 and n > 3:
            bank = cls(kernel_size=k, scheme=scheme, mode=mode, dense=True)
        else:
            bank = cls(kernel_size=k, scheme=scheme, mode=mode)
        if kernels.size != bank.weight.size:
            raise ValueError(f"{path}: {n} kernels do not fit a {bank.channels}-channel bank")
        bank.weight.data[...] = kernels.reshape(bank.weight.shape)
        return bank
