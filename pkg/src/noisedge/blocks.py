"""Network building blocks on top of the tensor engine.

A tiny module system: a ``Module`` discovers parameters (Tensor attributes
with requires_grad) and registered numpy buffers recursively, producing the
dotted-name ordering that checkpoints and the optimizer rely on. Attribute
insertion order is the traversal order, so construction code determines
naming deterministically.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .autograd import Tensor


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, flag: bool = True):
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequence of submodules addressed by index in dotted names."""

    def __init__(self, items):
        super().__init__()
        self.items = tuple(items)
        for i, m in enumerate(self.items):
            setattr(self, str(i), m)

    def _children(self):
        for i, m in enumerate(self.items):
            yield str(i), m

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 groups: int = 1):
        super().__init__()
        if padding is None:
            padding = k // 2
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        self.weight = Tensor(he_normal(rng, (cout, cin // groups, k, k), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        # switched off during finite-difference probing so repeated forward
        # passes stay pure
        self.update_running = True

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, training=self.training,
                               momentum=self.momentum, eps=self.eps,
                               update_running=self.update_running and self.training)


def freeze_running_stats(module: Module, flag: bool = True) -> None:
    """Stop every BatchNorm2d under ``module`` from mutating its buffers."""
    if isinstance(module, BatchNorm2d):
        module.update_running = not flag
    for _, child in module._children():
        freeze_running_stats(child, flag)


class ConvBnRelu(Module):
    def __init__(self, cin, cout, k, rng, stride=1):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    """Two 3x3 convs with identity (or projected) skip."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(x)))))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ops.relu(ops.add(out, skip))


def make_stage(cin: int, cout: int, depth: int, rng: np.random.Generator,
               stride: int = 1) -> ModuleList:
    blocks = [BasicBlock(cin, cout, rng, stride=stride)]
    blocks.extend(BasicBlock(cout, cout, rng) for _ in range(depth - 1))
    return ModuleList(blocks)


def run_stage(stage: ModuleList, x: Tensor) -> Tensor:
    for block in stage:
        x = block(x)
    return x


class ARM(Module):
    """Channel attention: f * sigmoid(bn(conv1x1(gap(f))))."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, rng, bias=False)
        self.bn = BatchNorm2d(channels)

    def forward(self, f: Tensor) -> Tensor:
        gate = ops.sigmoid(self.bn(self.conv(ops.global_avgpool(f))))
        return ops.mul(f, gate)


class FFM(Module):
    """Concat-compress fusion with a channel gate: out = h + h*a."""

    def __init__(self, cin_total: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.compress = Conv2d(cin_total, cout, 1, rng, bias=False)
        self.bn = BatchNorm2d(cout)
        hidden = max(cout // 4, 1)
        self.gate1 = Conv2d(cout, hidden, 1, rng)
        self.gate2 = Conv2d(hidden, cout, 1, rng)

    def forward(self, fa: Tensor, fb: Tensor) -> Tensor:
        if fa.shape[2:] != fb.shape[2:]:
            raise ValueError(f"FFM inputs must share spatial size, got {fa.shape} vs {fb.shape}")
        h = ops.relu(self.bn(self.compress(ops.concat_channels([fa, fb]))))
        a = ops.sigmoid(self.gate2(ops.relu(self.gate1(ops.global_avgpool(h)))))
        return ops.add(h, ops.mul(h, a))


class EEB(Module):
    """Edge extraction: squeeze to C/4, residual pair of 3x3 convs, 1-channel out."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        mid = max(channels // 4, 1)
        self.entry = Conv2d(channels, mid, 1, rng)
        self.body1 = Conv2d(mid, mid, 3, rng)
        self.body2 = Conv2d(mid, mid, 3, rng)
        self.exit = Conv2d(mid, 1, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        u = self.entry(f)
        v = ops.relu(ops.add(u, self.body2(ops.relu(self.body1(u)))))
        return self.exit(v)
