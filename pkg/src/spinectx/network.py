"""Residual encoder-decoder with a multi-dilation context block at the bottleneck."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import (BNState, ConvSpec, Tape, Tensor5, add, batchnorm, concat, conv3d,
                     maxpool3d, relu, sigmoid, upsample)

DILATION_PRESETS: Dict[str, Tuple[int, int, int, int]] = {
    "abl-1": (1, 1, 1, 1),
    "abl-2": (1, 2, 3, 4),
    "abl-3": (1, 4, 8, 16),
    "default": (1, 2, 4, 8),
}

# foreground prior used to initialise the head bias; spine voxels are a few
# percent of a CT volume, so starting at p=0.5 wastes early steps on background
HEAD_PRIOR = 0.01


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``patch_shape`` is in internal (d, h, w) order, so a 128x128x64 patch
    (x, y, z) is ``(64, 128, 128)``.
    """

    in_channels: int = 1
    encoder_widths: Tuple[int, int, int] = (16, 32, 64)
    bottleneck_width: int = 128
    context_branch_width: Optional[int] = None
    dilation_rates: Tuple[int, int, int, int] = (1, 2, 4, 8)
    patch_shape: Tuple[int, int, int] = (64, 128, 128)
    out_channels: int = 1
    up_kernel: int = 1
    capture_bottleneck: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        object.__setattr__(self, "dilation_rates", tuple(int(v) for v in self.dilation_rates))
        object.__setattr__(self, "patch_shape", tuple(int(v) for v in self.patch_shape))
        if self.context_branch_width is None:
            object.__setattr__(self, "context_branch_width", max(1, self.bottleneck_width // 4))
        if len(self.encoder_widths) != 3:
            raise ValueError(f"exactly 3 encoder widths required, got {self.encoder_widths}")
        if len(self.dilation_rates) != 4:
            raise ValueError(f"exactly 4 dilation rates required, got {self.dilation_rates}")
        if any(r < 1 for r in self.dilation_rates):
            raise ValueError(f"dilation rates must be >= 1, got {self.dilation_rates}")
        widths = self.encoder_widths + (self.bottleneck_width, self.context_branch_width,
                                        self.in_channels, self.out_channels)
        if any(w < 1 for w in widths):
            raise ValueError(f"channel widths must be positive, got {widths}")
        if len(self.patch_shape) != 3 or any(p < 8 or p % 8 for p in self.patch_shape):
            raise ValueError(f"patch dims must be positive multiples of 8, got {self.patch_shape}")
        if self.up_kernel not in (1, 3):
            raise ValueError(f"up_kernel must be 1 or 3, got {self.up_kernel}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            d.setdefault("dilation_rates", preset_rates(preset))
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int]:
        return tuple(p // 8 for p in self.patch_shape)


def preset_rates(name: str) -> Tuple[int, int, int, int]:
    try:
        return DILATION_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown dilation preset {name!r}; choose from {sorted(DILATION_PRESETS)}") from None


# ---------------------------------------------------------------------------
# layer table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "conv" or "bn"
    channels_in: int
    channels_out: int
    level: int  # number of 2x poolings above this layer's resolution
    kernel: int = 1
    dilation: int = 1
    bias: bool = False

    @property
    def param_count(self) -> int:
        if self.kind == "bn":
            return 2 * self.channels_out
        k = self.kernel
        return self.channels_out * self.channels_in * k ** 3 + (self.channels_out if self.bias else 0)

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(self.channels_in, self.channels_out, self.kernel, self.dilation,
                        has_bias=self.bias)


def _res_layers(prefix: str, cin: int, cout: int, level: int) -> List[Layer]:
    out = [
        Layer(f"{prefix}.conv1", "conv", cin, cout, level, 3),
        Layer(f"{prefix}.bn1", "bn", cout, cout, level),
        Layer(f"{prefix}.conv2", "conv", cout, cout, level, 3),
        Layer(f"{prefix}.bn2", "bn", cout, cout, level),
    ]
    if cin != cout:
        out += [Layer(f"{prefix}.proj", "conv", cin, cout, level, 1),
                Layer(f"{prefix}.proj_bn", "bn", cout, cout, level)]
    return out


def architecture(config: ModelConfig) -> List[Layer]:
    """Every parameterised layer, in forward execution order."""
    w1, w2, w3 = config.encoder_widths
    wb, wc = config.bottleneck_width, config.context_branch_width
    layers: List[Layer] = []
    cin = config.in_channels
    for i, w in enumerate((w1, w2, w3)):
        layers += _res_layers(f"enc{i + 1}", cin, w, i)
        cin = w
    layers += _res_layers("bottleneck", w3, wb, 3)
    for i, r in enumerate(config.dilation_rates):
        layers.append(Layer(f"context.branch{i + 1}", "conv", wb, wc, 3, 3, r))
    layers += [Layer("context.fuse", "conv", 4 * wc, wb, 3, 1),
               Layer("context.bn", "bn", wb, wb, 3)]
    cin = wb
    for stage, skip in ((3, w3), (2, w2), (1, w1)):
        lvl = stage - 1
        layers += [Layer(f"dec{stage}.up", "conv", cin, skip, lvl, config.up_kernel),
                   Layer(f"dec{stage}.up_bn", "bn", skip, skip, lvl)]
        layers += _res_layers(f"dec{stage}.res", 2 * skip, skip, lvl)
        cin = skip
    layers.append(Layer("head", "conv", w1, config.out_channels, 0, 1, bias=True))
    return layers


def param_count(config: ModelConfig) -> int:
    """Learnable scalars: conv weights, biases, BN gamma and beta."""
    return sum(layer.param_count for layer in architecture(config))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamStore:
    """Named learnable tensors plus BN running statistics.

    Iteration order is the layer-table order and is stable across
    serialization.
    """

    params: "OrderedDict[str, Tensor5]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __getitem__(self, name: str) -> Tensor5:
        return self.params[name]

    def bn(self, name: str) -> BNState:
        return BNState(self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                       self.buffers.get(f"{name}.running_mean"),
                       self.buffers.get(f"{name}.running_var"),
                       self.bn_momentum, self.bn_eps)

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for k, t in self.params.items():
            yield k, t.data
        yield from self.buffers.items()

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)
        for k, t in self.params.items():
            out.params[k] = Tensor5(t.data.astype(dtype), requires_grad=True, name=k)
        for k, b in self.buffers.items():
            out.buffers[k] = b.astype(dtype)
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore(bn_momentum=self.bn_momentum, bn_eps=self.bn_eps)
        for k, t in self.params.items():
            out.params[k] = Tensor5(t.data.copy(), requires_grad=True, name=k)
        for k, b in self.buffers.items():
            out.buffers[k] = b.copy()
        return out


def _vec(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).reshape(1, -1, 1, 1, 1)


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """He (fan-in) normal conv weights, BN gamma=1 and beta=0.

    Biases start at zero except the head, which starts at ``logit(HEAD_PRIOR)``.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for layer in architecture(config):
        if layer.kind == "conv":
            fan_in = layer.channels_in * layer.kernel ** 3
            w = rng.standard_normal(layer.spec.weight_shape) * np.sqrt(2.0 / fan_in)
            store.params[f"{layer.name}.weight"] = Tensor5(w.astype(np.float32), True,
                                                           f"{layer.name}.weight")
            if layer.bias:
                b0 = np.log(HEAD_PRIOR / (1 - HEAD_PRIOR)) if layer.name == "head" else 0.0
                store.params[f"{layer.name}.bias"] = Tensor5(
                    _vec(np.full(layer.channels_out, b0)), True, f"{layer.name}.bias")
        else:
            c = layer.channels_out
            store.params[f"{layer.name}.gamma"] = Tensor5(_vec(np.ones(c)), True,
                                                          f"{layer.name}.gamma")
            store.params[f"{layer.name}.beta"] = Tensor5(_vec(np.zeros(c)), True,
                                                         f"{layer.name}.beta")
            store.buffers[f"{layer.name}.running_mean"] = np.zeros(c, dtype=np.float32)
            store.buffers[f"{layer.name}.running_var"] = np.ones(c, dtype=np.float32)
    return store


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _conv(x, params, name, spec, tape):
    bias = params.params.get(f"{name}.bias")
    return conv3d(x, params[f"{name}.weight"], spec, bias, tape)


def _cbr(x, params, conv_name, bn_name, spec, train, tape):
    y = _conv(x, params, conv_name, spec, tape)
    return relu(batchnorm(y, params.bn(bn_name), train, tape), tape)


def residual_block(x: Tensor5, params: ParamStore, prefix: str, in_c: int, out_c: int,
                   train: bool = False, tape: Optional[Tape] = None) -> Tensor5:
    """ReLU(BN(conv(ReLU(BN(conv(x))))) + shortcut(x)); 1x1x1 projection when widths differ."""
    if in_c != out_c and f"{prefix}.proj.weight" not in params.params:
        raise ValueError(f"residual block {prefix!r} maps {in_c}->{out_c} but has no projection")
    h = _cbr(x, params, f"{prefix}.conv1", f"{prefix}.bn1", ConvSpec(in_c, out_c), train, tape)
    h = _conv(h, params, f"{prefix}.conv2", ConvSpec(out_c, out_c), tape)
    h = batchnorm(h, params.bn(f"{prefix}.bn2"), train, tape)
    if in_c != out_c:
        s = _conv(x, params, f"{prefix}.proj", ConvSpec(in_c, out_c, kernel=1), tape)
        s = batchnorm(s, params.bn(f"{prefix}.proj_bn"), train, tape)
    else:
        s = x
    return relu(add(h, s, tape), tape)


def context_block(f_in: Tensor5, params: ParamStore, rates, branch_width: int,
                  train: bool = False, tape: Optional[Tape] = None) -> Tensor5:
    """Parallel dilated 3x3x3 branches, concatenated and fused by 1x1x1 conv + BN + ReLU."""
    rates = tuple(rates)
    if len(rates) != 4 or any(r < 1 for r in rates):
        raise ValueError(f"context block needs 4 dilation rates >= 1, got {rates}")
    width = f_in.shape[1]
    branches = [
        _conv(f_in, params, f"context.branch{i + 1}", ConvSpec(width, branch_width, 3, r), tape)
        for i, r in enumerate(rates)
    ]
    cat = concat(branches, tape)
    fused = _conv(cat, params, "context.fuse", ConvSpec(4 * branch_width, width, kernel=1), tape)
    return relu(batchnorm(fused, params.bn("context.bn"), train, tape), tape)


def forward(x, config: ModelConfig, params: ParamStore, mode: str = "infer",
            tape: Optional[Tape] = None) -> Tuple[Tensor5, Tensor5]:
    """Run the network; returns (logits, bottleneck activations).

    ``mode`` is ``"train"`` (batch statistics, running stats updated) or
    ``"infer"`` (running statistics).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not isinstance(x, Tensor5):
        x = Tensor5(x)
    n, c, d, h, w = x.shape
    if c != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channel(s), got shape {x.shape}")
    bad = [(a, s) for a, s in zip("dhw", (d, h, w)) if s % 8]
    if bad:
        raise ValueError(f"spatial dims must be divisible by 8; offending {bad}")
    train = mode == "train"
    w1, w2, w3 = config.encoder_widths
    wb = config.bottleneck_width

    skips = []
    cin = config.in_channels
    cur = x
    for i, width in enumerate((w1, w2, w3)):
        cur = residual_block(cur, params, f"enc{i + 1}", cin, width, train, tape)
        skips.append(cur)
        cur = maxpool3d(cur, tape)
        cin = width
    cur = residual_block(cur, params, "bottleneck", w3, wb, train, tape)
    bott = context_block(cur, params, config.dilation_rates, config.context_branch_width,
                         train, tape)
    cur = bott
    cin = wb
    for stage, skip in zip((3, 2, 1), reversed(skips)):
        width = skip.shape[1]
        up = upsample(cur, tape)
        up = _cbr(up, params, f"dec{stage}.up", f"dec{stage}.up_bn",
                  ConvSpec(cin, width, config.up_kernel), train, tape)
        cur = concat([up, skip], tape)
        cur = residual_block(cur, params, f"dec{stage}.res", 2 * width, width, train, tape)
        cin = width
    logits = _conv(cur, params, "head", ConvSpec(w1, config.out_channels, 1, has_bias=True), tape)
    return logits, bott


def predict_logits(x: np.ndarray, config: ModelConfig, params: ParamStore) -> np.ndarray:
    return forward(Tensor5(x), config, params, "infer")[0].data


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

def grad_cam(x, config: ModelConfig, params: ParamStore) -> np.ndarray:
    """Bottleneck Grad-CAM heat map in [0, 1], shaped like the input volume.

    Target scalar is the sum of voxel probabilities. Returns an array of
    shape ``(n, d, h, w)``.
    """
    if not config.capture_bottleneck:
        raise ValueError("grad_cam requires a config with bottleneck capture enabled")
    if not isinstance(x, Tensor5):
        x = Tensor5(x)
    tape = Tape()
    logits, bott = forward(x, config, params, "infer", tape)
    probs = sigmoid(logits, tape)
    tape.backward(probs, np.ones_like(probs.data))
    grads = bott.grad if bott.grad is not None else np.zeros_like(bott.data)
    params.zero_grad()
    alpha = grads.mean(axis=(2, 3, 4), keepdims=True)
    cam = np.maximum((alpha * bott.data).sum(axis=1, keepdims=True), 0)
    for _ in range(3):
        cam = ops.trilinear_upsample(cam)
    cam = cam[:, 0]
    out = np.zeros_like(cam, dtype=np.float32)
    for i in range(cam.shape[0]):
        lo, hi = cam[i].min(), cam[i].max()
        if hi > lo:
            out[i] = (cam[i] - lo) / (hi - lo)
        elif hi > 0:
            out[i] = 1.0
    return out


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------

def summary_rows(config: ModelConfig) -> List[dict]:
    rows = []
    for layer in architecture(config):
        shape = tuple(p >> layer.level for p in config.patch_shape)
        rows.append({
            "name": layer.name,
            "kind": layer.kind,
            "in": layer.channels_in,
            "out": layer.channels_out,
            "kernel": layer.kernel if layer.kind == "conv" else "-",
            "dilation": layer.dilation if layer.kind == "conv" else "-",
            "output": (layer.channels_out,) + shape,
            "params": layer.param_count,
        })
    return rows


def extent_report(config: ModelConfig) -> List[dict]:
    """Per-branch kernel extents against the bottleneck plane.

    A branch is flagged as a sampling void when its tap stride reaches the
    plane size: every off-centre tap then reads zero padding.
    """
    plane = min(config.bottleneck_shape[1:])
    out = []
    for r in config.dilation_rates:
        ext = ops.kernel_extent(3, r)
        out.append({"rate": r, "extent": ext, "plane": plane, "void": r >= plane})
    return out
