"""The full detection network: noise extraction, dual-branch backbone,
attention-refined fusion, mask head, and edge head.

Topology (input size S, base width w):

* stem: 7x7 stride-2 conv + 3x3 stride-2 maxpool -> S/4, width w
* layer1 (S/4, w), layer2 (S/8, 2w), shared by both branches
* high-res branch: layer3h (S/8, 4w), layer4h (S/8, 8w), stride 1
* context branch: layer3l (S/16, 4w), layer4l (S/32, 8w), stride 2
* context features pass ARM then (optionally) distance attention, then both
  branches fuse: FFM(Up2(f3l) + Conv1x1(f4h), Up4(f4l) + f4h)
* mask head: three rounds of (upsample x2, 3x3 conv),
  channels ff -> ff/4 -> ff/16 -> 1, sigmoid; output at full resolution
* edge head: one single-channel edge predictor per tapped feature,
  upsampled to S/4, concatenated, 3x3 conv, sigmoid

Ablation switches reduce the topology (single branch, no constrained
kernels, no edge head, no or vanilla attention) without changing the shape
of any produced output.

Checkpoints are a single file: a text header of config key=value lines,
then one length-prefixed little-endian float32 blob per parameter or
batchnorm buffer, then a sha256 line over everything before it. Parameters
are held in float64 in memory; the 32-bit storage makes save -> load ->
save byte-stable after the first rounding.
"""
from __future__ import annotations

import hashlib
import logging

import numpy as np

from . import ops
from .attention import DistanceNonLocal
from .autograd import Tensor
from .blocks import (
    ARM,
    EEB,
    FFM,
    BatchNorm2d,
    Conv2d,
    Module,
    ModuleList,
    make_stage,
    run_stage,
)
from .constrained import MODES, SCHEMES, ConstrainedKernelBank

log = logging.getLogger(__name__)

# BGR channel means and the printed divisors (named variances in the source
# convention, numerically standard deviations)
BGR_MEANS = (0.406, 0.456, 0.485)
BGR_DIVISORS = (0.225, 0.224, 0.229)

NONLOCAL_MODES = ("none", "vanilla", "distance")
EDGE_SHAPES = ("rect", "cross", "ellipse")

CHECKPOINT_MAGIC = "nedbnet-checkpoint v1"


class ModelConfig:
    """Architecture switches; validates and round-trips through key=value text."""

    _BOOL_FIELDS = ("strict_center", "dense_bank", "dual_branch",
                    "use_constrained", "use_edge")
    _INT_FIELDS = ("base_width", "input_size", "kernel_size", "fusion_width", "seed")
    _FLOAT_FIELDS = ("alpha",)
    _STR_FIELDS = ("scheme", "mode", "nonlocal_mode", "edge_shape")

    def __init__(self, base_width: int = 8, input_size: int = 64,
                 depths=(1, 1, 1, 1), fusion_width: int | None = None,
                 scheme: str = "laplace-like-d", kernel_size: int = 5,
                 mode: str = "improved", strict_center: bool = False,
                 dense_bank: bool = False, dual_branch: bool = True,
                 use_constrained: bool = True, nonlocal_mode: str = "distance",
                 use_edge: bool = True, edge_shape: str = "ellipse",
                 edge_size: int = 5, alpha: float = 0.3, seed: int = 0):
        self.base_width = int(base_width)
        self.input_size = int(input_size)
        self.depths = tuple(int(d) for d in depths)
        self.fusion_width = int(fusion_width) if fusion_width else 8 * self.base_width
        self.scheme = scheme
        self.kernel_size = int(kernel_size)
        self.mode = mode
        self.strict_center = bool(strict_center)
        self.dense_bank = bool(dense_bank)
        self.dual_branch = bool(dual_branch)
        self.use_constrained = bool(use_constrained)
        self.nonlocal_mode = nonlocal_mode
        self.use_edge = bool(use_edge)
        self.edge_shape = edge_shape
        self.edge_size = int(edge_size)
        self.alpha = float(alpha)
        self.seed = int(seed)
        self.validate()

    def validate(self) -> None:
        if self.base_width % 8 != 0:
            raise ValueError(f"base_width must be divisible by 8, got {self.base_width}")
        if self.input_size % 32 != 0:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ValueError(f"depths must be four positive stage depths, got {self.depths}")
        if self.fusion_width % 16 != 0:
            raise ValueError(f"fusion_width must be divisible by 16, got {self.fusion_width}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown projection mode {self.mode!r}")
        if self.nonlocal_mode not in NONLOCAL_MODES:
            raise ValueError(f"unknown nonlocal_mode {self.nonlocal_mode!r}")
        if self.edge_shape not in EDGE_SHAPES:
            raise ValueError(f"unknown edge_shape {self.edge_shape!r}")
        if self.edge_size % 2 == 0 or self.edge_size < 3:
            raise ValueError(f"edge_size must be odd and >= 3, got {self.edge_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-resolution configuration: 512 input, ResNet-34 depths, 256 fused channels."""
        base = dict(base_width=64, input_size=512, depths=(3, 4, 6, 3),
                    fusion_width=256)
        base.update(overrides)
        return cls(**base)

    def to_lines(self) -> list[str]:
        lines = []
        for f in self._INT_FIELDS:
            lines.append(f"{f}={getattr(self, f)}")
        lines.append("depths=" + ",".join(str(d) for d in self.depths))
        lines.append(f"edge_size={self.edge_size}")
        for f in self._FLOAT_FIELDS:
            lines.append(f"{f}={getattr(self, f):.17g}")
        for f in self._STR_FIELDS:
            lines.append(f"{f}={getattr(self, f)}")
        for f in self._BOOL_FIELDS:
            lines.append(f"{f}={'true' if getattr(self, f) else 'false'}")
        return lines

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        kwargs = {}
        for ln in lines:
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise ValueError(f"malformed config line {ln!r}")
            key, value = ln.split("=", 1)
            key = key.strip()
            value = value.strip()
            if key in cls._INT_FIELDS or key == "edge_size":
                kwargs[key] = int(value)
            elif key in cls._FLOAT_FIELDS:
                kwargs[key] = float(value)
            elif key in cls._STR_FIELDS:
                kwargs[key] = value
            elif key in cls._BOOL_FIELDS:
                if value not in ("true", "false"):
                    raise ValueError(f"boolean field {key} must be true/false, got {value!r}")
                kwargs[key] = value == "true"
            elif key == "depths":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# input normalization
# ---------------------------------------------------------------------------

def normalize_image(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) RGB uint8/float -> (3, H, W) float64 standardized BGR planes."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    bgr = np.ascontiguousarray(rgb[:, :, ::-1]).astype(np.float64) / 255.0
    planes = bgr.transpose(2, 0, 1)
    means = np.array(BGR_MEANS).reshape(3, 1, 1)
    divisors = np.array(BGR_DIVISORS).reshape(3, 1, 1)
    return (planes - means) / divisors


def denormalize_image(planes: np.ndarray) -> np.ndarray:
    """Inverse of normalize_image, back to (H, W, 3) RGB floats in [0, 255]."""
    if planes.ndim != 3 or planes.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) planes, got {planes.shape}")
    means = np.array(BGR_MEANS).reshape(3, 1, 1)
    divisors = np.array(BGR_DIVISORS).reshape(3, 1, 1)
    bgr = (planes * divisors + means) * 255.0
    return bgr.transpose(1, 2, 0)[:, :, ::-1]


def normalize_batch(images) -> Tensor:
    """Stack (H, W, 3) RGB images into a normalized N x 3 x H x W tensor."""
    return Tensor(np.stack([normalize_image(im) for im in images]))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class MaskHead(Module):
    """Three (upsample x2, 3x3 conv) rounds: ff -> ff/4 -> ff/16 -> 1, sigmoid."""

    def __init__(self, ff: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(ff, ff // 4, 3, rng)
        self.conv2 = Conv2d(ff // 4, ff // 16, 3, rng)
        self.conv3 = Conv2d(ff // 16, 1, 3, rng)

    def forward(self, ff: Tensor) -> Tensor:
        x = ops.relu(self.conv1(ops.bilinear_upsample(ff, 2)))
        x = ops.relu(self.conv2(ops.bilinear_upsample(x, 2)))
        return ops.sigmoid(self.conv3(ops.bilinear_upsample(x, 2)))


class EdgeHead(Module):
    """Per-tap edge predictors fused at quarter resolution."""

    def __init__(self, tap_channels, tap_factors, rng: np.random.Generator):
        super().__init__()
        self.factors = tuple(tap_factors)
        self.eebs = ModuleList([EEB(c, rng) for c in tap_channels])
        self.fuse = Conv2d(len(self.factors), 1, 3, rng)

    def forward(self, taps) -> Tensor:
        maps = []
        for tap, eeb, factor in zip(taps, self.eebs, self.factors):
            e = eeb(tap)
            maps.append(e if factor == 1 else ops.bilinear_upsample(e, factor))
        return ops.sigmoid(self.fuse(ops.concat_channels(maps)))


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class NedbModel(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.base_width
        d = config.depths

        self.bank = None
        if config.use_constrained:
            self.bank = ConstrainedKernelBank(
                kernel_size=config.kernel_size, scheme=config.scheme,
                mode=config.mode, seed=config.seed + 1,
                dense=config.dense_bank, strict_center=config.strict_center)

        self.stem_conv = Conv2d(3, w, 7, rng, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(w)
        self.layer1 = make_stage(w, w, d[0], rng)
        self.layer2 = make_stage(w, 2 * w, d[1], rng, stride=2)
        if config.dual_branch:
            self.layer3h = make_stage(2 * w, 4 * w, d[2], rng)
            self.layer4h = make_stage(4 * w, 8 * w, d[3], rng)
        self.layer3l = make_stage(2 * w, 4 * w, d[2], rng, stride=2)
        self.layer4l = make_stage(4 * w, 8 * w, d[3], rng, stride=2)

        if config.dual_branch:
            self.arm3 = ARM(4 * w, rng)
            self.arm4 = ARM(8 * w, rng)
            if config.nonlocal_mode != "none":
                use_d = config.nonlocal_mode == "distance"
                self.nl3 = DistanceNonLocal(4 * w, rng, use_distance=use_d)
                self.nl4 = DistanceNonLocal(8 * w, rng, use_distance=use_d)
            self.reduce4h = Conv2d(8 * w, 4 * w, 1, rng, bias=False)
            self.ffm = FFM(12 * w, config.fusion_width, rng)
        else:
            # plain backbone: deepest context feature projected to the fusion
            # width so the mask head is identical in both topologies
            self.context_proj = Conv2d(8 * w, config.fusion_width, 1, rng, bias=False)

        self.mask_head = MaskHead(config.fusion_width, rng)

        if config.use_edge:
            if config.dual_branch:
                channels = (w, 2 * w, 4 * w, 4 * w, 8 * w, 8 * w)
                factors = (1, 2, 2, 4, 2, 8)
            else:
                channels = (w, 2 * w, 4 * w, 8 * w)
                factors = (1, 2, 4, 8)
            self.edge_head = EdgeHead(channels, factors, rng)

    # ---- parameter plumbing -------------------------------------------

    def named_parameters(self, prefix: str = ""):
        if self.bank is not None:
            yield prefix + "bank.weight", self.bank.weight
        yield from super().named_parameters(prefix)

    def state_items(self):
        """Deterministic (name, array) sequence: parameters then buffers."""
        items = [(n, p.data) for n, p in self.named_parameters()]
        items.extend((n, b) for n, b in self.named_buffers())
        return items

    # ---- forward -------------------------------------------------------

    def _assert_scale(self, name: str, t: Tensor, divisor: int, size: int) -> None:
        want = (size // divisor, size // divisor)
        if t.shape[2:] != want:
            raise AssertionError(
                f"{name} resolved to {t.shape[2:]}, expected 1/{divisor} of {size} = {want}")

    def forward(self, image: Tensor):
        """Returns (mask, edge): mask at input resolution, edge at quarter
        resolution, both in (0, 1). ``edge`` is None without the edge head."""
        cfg = self.config
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W input, got {image.shape}")
        size = cfg.input_size
        if image.shape[2] != size or image.shape[3] != size:
            raise ValueError(f"expected {size} x {size} input, got {image.shape[2:]}")
        peak = float(np.max(np.abs(image.data)))
        if peak > 10.0:
            log.warning("input magnitude %.1f looks unnormalized (expected "
                        "standardized values)", peak)

        x = self.bank.extract_noise(image) if self.bank is not None else image
        x = ops.maxpool2d(ops.relu(self.stem_bn(self.stem_conv(x))), k=3, stride=2, padding=1)

        f1 = run_stage(self.layer1, x)
        f2 = run_stage(self.layer2, f1)
        self._assert_scale("layer1", f1, 4, size)
        self._assert_scale("layer2", f2, 8, size)

        f3l = run_stage(self.layer3l, f2)
        f4l = run_stage(self.layer4l, f3l)
        self._assert_scale("layer3l", f3l, 16, size)
        self._assert_scale("layer4l", f4l, 32, size)

        if cfg.dual_branch:
            f3h = run_stage(self.layer3h, f2)
            f4h = run_stage(self.layer4h, f3h)
            self._assert_scale("layer3h", f3h, 8, size)
            self._assert_scale("layer4h", f4h, 8, size)
            ff = self.fuse_branches(f3l, f4l, f4h)
            taps = (f1, f2, f3h, f3l, f4h, f4l)
        else:
            ff = self.context_proj(ops.bilinear_upsample(f4l, 4))
            taps = (f1, f2, f3l, f4l)

        self._assert_scale("ff", ff, 8, size)
        mask = self.mask_head(ff)
        self._assert_scale("mask", mask, 1, size)

        edge = None
        if cfg.use_edge:
            edge = self.edge_head(taps)
            self._assert_scale("edge", edge, 4, size)
        return mask, edge

    def fuse_branches(self, f3l: Tensor, f4l: Tensor, f4h: Tensor) -> Tensor:
        f3 = self.arm3(f3l)
        f4 = self.arm4(f4l)
        if self.config.nonlocal_mode != "none":
            f3 = self.nl3(f3)
            f4 = self.nl4(f4)
        first = ops.add(ops.bilinear_upsample(f3, 2), self.reduce4h(f4h))
        second = ops.add(ops.bilinear_upsample(f4, 4), f4h)
        return self.ffm(first, second)

    def project_bank(self) -> None:
        if self.bank is not None:
            self.bank.project()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: NedbModel, path) -> None:
    chunks = [CHECKPOINT_MAGIC.encode(), b""]
    chunks[1] = ("\n".join(model.config.to_lines())).encode()
    body = [chunks[0] + b"\n" + chunks[1] + b"\n"]
    items = model.state_items()
    body.append(f"#params {len(items)}\n".encode())
    for name, arr in items:
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else "0"
        body.append(f"blob {name} {dims}\n".encode())
        body.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body.append(b"\n")
    payload = b"".join(body)
    digest = hashlib.sha256(payload).hexdigest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(f"#sha256 {digest}\n".encode())


def _read_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode(), end + 1


def load_checkpoint(path) -> NedbModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    tail = buf.rfind(b"#sha256 ")
    if tail < 0:
        raise ValueError(f"{path}: missing checksum line")
    payload = buf[:tail]
    stated = buf[tail + len(b"#sha256 "):].strip().decode()
    actual = hashlib.sha256(payload).hexdigest()
    if stated != actual:
        raise ValueError(f"{path}: checksum mismatch (stored {stated[:12]}..., "
                         f"computed {actual[:12]}...)")

    line, pos = _read_line(payload, 0)
    if line != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (header {line!r})")
    config_lines = []
    while True:
        line, pos = _read_line(payload, pos)
        if line.startswith("#params "):
            count = int(line.split()[1])
            break
        config_lines.append(line)
    model = NedbModel(ModelConfig.from_lines(config_lines))

    expected = dict(model.state_items())
    seen = []
    for _ in range(count):
        header, pos = _read_line(payload, pos)
        parts = header.split()
        if parts[0] != "blob":
            raise ValueError(f"{path}: expected blob header, got {header!r}")
        name = parts[1]
        dims = tuple(int(v) for v in parts[2:])
        if dims == (0,):
            dims = ()
        if name not in expected:
            raise ValueError(f"{path}: unknown parameter {name!r}")
        target = expected[name]
        if tuple(target.shape) != dims:
            raise ValueError(f"{path}: {name} has shape {dims}, model expects "
                             f"{tuple(target.shape)}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        raw = payload[pos:pos + nbytes]
        pos += nbytes + 1     # trailing newline
        target[...] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
        seen.append(name)
    missing = set(expected) - set(seen)
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters {sorted(missing)[:5]}")
    return model
