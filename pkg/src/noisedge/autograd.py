"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` (float32 or float64). Operations in
:mod:`noisedge.ops` record themselves on the implicit tape: every op output
keeps references to its inputs plus a closure computing input gradients from
the output gradient. ``backward()`` on a scalar replays the recorded ops in
exact reverse creation order and accumulates gradients additively, so a
tensor feeding two paths receives the sum of both path gradients.

Recording can be suspended with :func:`no_grad` (used for evaluation and for
large forward passes where intermediate buffers should not be retained).
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_serial = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Context manager suspending tape recording."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array with optional participation in gradient recording.

    Network values are laid out NCHW (batch, channel, height, width); a
    scalar such as a loss has shape (1, 1, 1, 1). Rank-3 arrays appear only
    in the batched matrix ops used by attention. Non-finite values are
    rejected at construction, which covers every op boundary because ops
    build their results through this constructor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values (NaN or Inf) are rejected at op boundaries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_serial)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward) -> "Tensor":
        out = cls(data)
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        return out

    # ---- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- graph mechanics ----------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from this scalar to every recorded leaf.

        Gradients are accumulated into ``.grad`` of leaves with
        ``requires_grad`` set. Raises if the tensor is detached (nothing was
        recorded) or is not a scalar.
        """
        if self._backward is None:
            raise RuntimeError("backward on a detached graph: no operations were recorded for this tensor")
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)

        # Creation order is recording order, so descending serials replay the
        # tape exactly backwards.
        order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
        pending = {id(self): np.ones_like(self.data)}
        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t._backward is not None:
                for parent, pg in zip(t._parents, t._backward(g)):
                    if pg is None:
                        continue
                    if parent._backward is None and not parent.requires_grad:
                        continue
                    acc = pending.get(id(parent))
                    pending[id(parent)] = pg if acc is None else acc + pg
            elif t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g

    # ---- operator sugar (delegates to ops) -----------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow_const(self, exponent)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))
