"""Finite-difference verification of tape gradients.

Every op in :mod:`noisedge.ops` registers a small 64-bit test case here. A
case builds random parameters, runs a forward closure producing a scalar,
and the checker compares tape gradients against central differences
(f(x+h) - f(x-h)) / 2h with h = 1e-4. Agreement is measured as
``||a - n|| / max(||a||, ||n||, 1e-8)``; the norm form keeps near-zero
gradient entries from drowning the comparison in finite-difference noise.

Random inputs are kept away from the kinks of relu and maxpool (FD across a
kink measures the wrong one-sided slope, which is a property of the probe,
not a tape bug).
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autograd import Tensor, no_grad

DEFAULT_H = 1e-4
DEFAULT_TOL = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, clamp: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), clamp)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(forward: Callable[[], Tensor], param: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of ``forward()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward().item()
            flat[i] = orig - h
            fm = forward().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_function(forward: Callable[[], Tensor], params: dict[str, Tensor],
                   h: float = DEFAULT_H, corrupt: bool = False) -> float:
    """Worst relative error over all parameters of a scalar-valued closure."""
    for p in params.values():
        p.grad = None
    forward().backward()
    worst = 0.0
    for p in params.values():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if corrupt:
            analytic = analytic * 1.1 + 0.05
        numeric = numeric_gradient(forward, p, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_function_sampled(forward: Callable[[], Tensor], params: dict[str, Tensor],
                           n_samples: int, rng: np.random.Generator,
                           h: float = DEFAULT_H) -> float:
    """FD check on ``n_samples`` random parameter entries (for large models).

    Errors are pooled into one norm-based figure so a single near-zero entry
    does not dominate.
    """
    for p in params.values():
        p.grad = None
    forward().backward()
    names = sorted(params)
    picks = []
    for _ in range(n_samples):
        name = names[rng.integers(len(names))]
        picks.append((name, int(rng.integers(params[name].size))))
    analytic = np.empty(n_samples)
    numeric = np.empty(n_samples)
    with no_grad():
        for s, (name, idx) in enumerate(picks):
            p = params[name]
            analytic[s] = 0.0 if p.grad is None else p.grad.reshape(-1)[idx]
            flat = p.data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            fp = forward().item()
            flat[idx] = orig - h
            fm = forward().item()
            flat[idx] = orig
            numeric[s] = (fp - fm) / (2.0 * h)
    return relative_error(analytic, numeric)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

OP_CASES: dict[str, Callable] = {}


def op_case(name: str):
    def register(builder):
        OP_CASES[name] = builder
        return builder

    return register


def _param(rng: np.random.Generator, *shape, away_from_zero: bool = False) -> Tensor:
    data = rng.uniform(-1.0, 1.0, size=shape)
    if away_from_zero:
        data = np.sign(data) * (0.2 + np.abs(data))
    return Tensor(data, requires_grad=True)


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce to a scalar with fixed random weights so the incoming gradient
    of the op under test is non-constant."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=t.shape))
    return ops.sum_all(ops.mul(t, w))


@op_case("add")
def _case_add(rng):
    a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 4, 4)
    return {"a": a, "b": b}, lambda: _weighted_sum(ops.add(a, b), np.random.default_rng(0))


@op_case("sub")
def _case_sub(rng):
    a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 4, 4)
    return {"a": a, "b": b}, lambda: _weighted_sum(ops.sub(a, b), np.random.default_rng(1))


@op_case("mul")
def _case_mul(rng):
    a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 4, 4)
    return {"a": a, "b": b}, lambda: _weighted_sum(ops.mul(a, b), np.random.default_rng(2))


@op_case("mul_broadcast")
def _case_mul_broadcast(rng):
    # channel-gate pattern used by the attention refinement blocks
    a, gate = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 1, 1)
    return {"a": a, "gate": gate}, lambda: _weighted_sum(ops.mul(a, gate), np.random.default_rng(3))


@op_case("div")
def _case_div(rng):
    a = _param(rng, 2, 3, 4, 4)
    b = _param(rng, 2, 3, 4, 4, away_from_zero=True)
    return {"a": a, "b": b}, lambda: _weighted_sum(ops.div(a, b), np.random.default_rng(4))


@op_case("pow_const")
def _case_pow(rng):
    x = Tensor(rng.uniform(0.2, 1.5, size=(2, 2, 3, 3)), requires_grad=True)
    return {"x": x}, lambda: _weighted_sum(ops.pow_const(x, 2.0), np.random.default_rng(5))


@op_case("relu")
def _case_relu(rng):
    x = _param(rng, 2, 3, 4, 4, away_from_zero=True)
    return {"x": x}, lambda: _weighted_sum(ops.relu(x), np.random.default_rng(6))


@op_case("sigmoid")
def _case_sigmoid(rng):
    x = _param(rng, 2, 3, 4, 4)
    return {"x": x}, lambda: _weighted_sum(ops.sigmoid(x), np.random.default_rng(7))


@op_case("sum_all")
def _case_sum(rng):
    x = _param(rng, 2, 3, 4, 4)
    return {"x": x}, lambda: ops.sum_all(ops.mul(x, x))


@op_case("mean_all")
def _case_mean(rng):
    x = _param(rng, 2, 3, 4, 4)
    return {"x": x}, lambda: ops.mean_all(ops.mul(x, x))


@op_case("reshape")
def _case_reshape(rng):
    x = _param(rng, 2, 3, 4, 4)
    return {"x": x}, lambda: _weighted_sum(
        ops.reshape(x, (2, 3, 16, 1)), np.random.default_rng(8))


@op_case("swap_last_axes")
def _case_swap(rng):
    x = _param(rng, 2, 3, 4, 5)
    return {"x": x}, lambda: _weighted_sum(ops.swap_last_axes(x), np.random.default_rng(9))


@op_case("concat_channels")
def _case_concat(rng):
    a, b = _param(rng, 2, 2, 4, 4), _param(rng, 2, 3, 4, 4)
    return {"a": a, "b": b}, lambda: _weighted_sum(
        ops.concat_channels([a, b]), np.random.default_rng(10))


@op_case("slice_channels")
def _case_slice(rng):
    x = _param(rng, 2, 5, 4, 4)
    return {"x": x}, lambda: _weighted_sum(
        ops.slice_channels(x, 1, 4), np.random.default_rng(11))


@op_case("conv2d")
def _case_conv(rng):
    x = _param(rng, 1, 2, 5, 5)
    w = _param(rng, 3, 2, 3, 3)
    b = _param(rng, 3)
    return {"x": x, "w": w, "b": b}, lambda: _weighted_sum(
        ops.conv2d(x, w, b, stride=1, padding=1), np.random.default_rng(12))


@op_case("conv2d_strided")
def _case_conv_strided(rng):
    x = _param(rng, 2, 3, 7, 7)
    w = _param(rng, 4, 3, 3, 3)
    return {"x": x, "w": w}, lambda: _weighted_sum(
        ops.conv2d(x, w, stride=2, padding=1), np.random.default_rng(13))


@op_case("conv2d_grouped")
def _case_conv_grouped(rng):
    x = _param(rng, 2, 4, 5, 5)
    w = _param(rng, 4, 2, 3, 3)
    return {"x": x, "w": w}, lambda: _weighted_sum(
        ops.conv2d(x, w, stride=1, padding=1, groups=2), np.random.default_rng(14))


@op_case("batchnorm_train")
def _case_bn_train(rng):
    x = _param(rng, 4, 3, 4, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = _param(rng, 3)
    rm = np.zeros(3)
    rv = np.ones(3)
    return {"x": x, "gamma": gamma, "beta": beta}, lambda: _weighted_sum(
        ops.batchnorm2d(x, gamma, beta, rm, rv, training=True, update_running=False),
        np.random.default_rng(15))


@op_case("batchnorm_eval")
def _case_bn_eval(rng):
    x = _param(rng, 2, 3, 4, 4)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    beta = _param(rng, 3)
    rm = rng.uniform(-0.5, 0.5, size=3)
    rv = rng.uniform(0.5, 1.5, size=3)
    return {"x": x, "gamma": gamma, "beta": beta}, lambda: _weighted_sum(
        ops.batchnorm2d(x, gamma, beta, rm, rv, training=False), np.random.default_rng(16))


@op_case("maxpool2d")
def _case_maxpool(rng):
    # distinct, well-separated values so FD probes never flip the argmax
    n = 1 * 2 * 6 * 6
    vals = rng.permutation(n).astype(np.float64).reshape(1, 2, 6, 6) * 0.1
    x = Tensor(vals, requires_grad=True)
    return {"x": x}, lambda: _weighted_sum(
        ops.maxpool2d(x, k=3, stride=2, padding=1), np.random.default_rng(17))


@op_case("global_avgpool")
def _case_gap(rng):
    x = _param(rng, 2, 3, 5, 5)
    return {"x": x}, lambda: _weighted_sum(ops.global_avgpool(x), np.random.default_rng(18))


@op_case("bilinear_upsample_x2")
def _case_up2(rng):
    x = _param(rng, 2, 3, 4, 4)
    return {"x": x}, lambda: _weighted_sum(
        ops.bilinear_upsample(x, 2), np.random.default_rng(19))


@op_case("bilinear_upsample_x4")
def _case_up4(rng):
    x = _param(rng, 1, 2, 3, 3)
    return {"x": x}, lambda: _weighted_sum(
        ops.bilinear_upsample(x, 4), np.random.default_rng(20))


@op_case("matmul")
def _case_matmul(rng):
    a = _param(rng, 2, 3, 4)
    b = _param(rng, 2, 4, 5)
    return {"a": a, "b": b}, lambda: _weighted_sum(ops.matmul(a, b), np.random.default_rng(21))


@op_case("softmax_rows")
def _case_softmax(rng):
    x = _param(rng, 2, 4, 6)
    return {"x": x}, lambda: _weighted_sum(ops.softmax_rows(x), np.random.default_rng(22))


if not OP_CASES:
    raise AssertionError("op registry is empty; case decorators failed to run")


def run_registry(seed: int = 0, tol: float = DEFAULT_TOL,
                 inject_fault: bool = False) -> list[tuple[str, float, bool]]:
    """Check every registered op; returns (name, worst_rel_err, passed) rows.

    ``inject_fault`` corrupts the tape gradients before comparison, which
    must make the table report failures (a self-test of the checker).
    """
    rows = []
    for name, builder in OP_CASES.items():
        params, forward = builder(np.random.default_rng(seed))
        err = check_function(forward, params, corrupt=inject_fault)
        rows.append((name, err, err < tol))
    return rows
