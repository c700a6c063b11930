"""Rank-5 tensors and a tape for reverse-mode differentiation.

The recorded operators below wrap the kernels in :mod:`spinectx.ops`. When
``tape`` is ``None`` nothing is recorded and no forward intermediates are
kept, which is the inference path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops


class Tensor5:
    """Dense ``(n, c, d, h, w)`` array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        data = np.asarray(data)
        if data.ndim != 5:
            raise ValueError(f"Tensor5 needs rank-5 data, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor5(shape={self.shape}, dtype={self.dtype}, name={self.name!r})"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    padding: Optional[int] = None
    stride: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @property
    def pad(self) -> int:
        if self.padding is None:
            return ops.same_padding(self.kernel, self.dilation)
        return self.padding

    @property
    def extent(self) -> int:
        return ops.kernel_extent(self.kernel, self.dilation)

    @property
    def weight_shape(self):
        k = self.kernel
        return (self.out_channels, self.in_channels, k, k, k)


@dataclass
class BNState:
    gamma: Tensor5
    beta: Tensor5
    running_mean: Optional[np.ndarray]
    running_var: Optional[np.ndarray]
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def channels(self) -> int:
        return self.gamma.data.size


@dataclass
class _Op:
    backward: Callable
    inputs: Sequence[Tensor5]
    output: Tensor5


class Tape:
    """Ordered record of executed operators.

    :meth:`backward` replays the record in reverse, visiting each operator
    once and summing gradient contributions into every consumed tensor.
    """

    def __init__(self):
        self.ops: List[_Op] = []

    def record(self, backward, inputs, output) -> None:
        self.ops.append(_Op(backward, tuple(inputs), output))

    def backward(self, output: Tensor5, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            seed = np.ones_like(output.data)
        output.accumulate(seed)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            grads = op.backward(g)
            for t, gi in zip(op.inputs, grads):
                if gi is not None and t.requires_grad:
                    t.accumulate(gi)
        self.ops.clear()

    def __len__(self):
        return len(self.ops)


def _out(data, tape) -> Tensor5:
    return Tensor5(data, requires_grad=tape is not None)


def _needs(tape, *tensors) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def conv3d(x: Tensor5, weight: Tensor5, spec: ConvSpec, bias: Optional[Tensor5] = None,
           tape: Optional[Tape] = None) -> Tensor5:
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} does not match {spec}")
    b = None if bias is None else bias.data.reshape(-1)
    y, ctx = ops.conv3d_forward(x.data, weight.data, b, spec.dilation, spec.pad, spec.stride)
    out = _out(y, tape)
    ins = (x, weight) if bias is None else (x, weight, bias)
    if _needs(tape, *ins):
        def backward(g):
            gx, gw, gb = ops.conv3d_backward(g, ctx)
            if bias is None:
                return gx, gw
            return gx, gw, gb.reshape(bias.shape)
        tape.record(backward, ins, out)
    return out


def batchnorm(x: Tensor5, state: BNState, train: bool, tape: Optional[Tape] = None) -> Tensor5:
    if x.shape[1] != state.channels:
        raise ValueError(f"batchnorm for {state.channels} channels got input {x.shape}")
    gamma = state.gamma.data.reshape(-1)
    beta = state.beta.data.reshape(-1)
    y, ctx = ops.batchnorm_forward(x.data, gamma, beta, state.running_mean, state.running_var,
                                   train, state.momentum, state.eps)
    out = _out(y, tape)
    ins = (x, state.gamma, state.beta)
    if _needs(tape, *ins):
        def backward(g):
            gx, gg, gb = ops.batchnorm_backward(g, ctx)
            return gx, gg.reshape(state.gamma.shape), gb.reshape(state.beta.shape)
        tape.record(backward, ins, out)
    return out


def relu(x: Tensor5, tape: Optional[Tape] = None) -> Tensor5:
    y, mask = ops.relu_forward(x.data)
    out = _out(y, tape)
    if _needs(tape, x):
        tape.record(lambda g: (ops.relu_backward(g, mask),), (x,), out)
    return out


def maxpool3d(x: Tensor5, tape: Optional[Tape] = None) -> Tensor5:
    y, idx = ops.maxpool3d_forward(x.data)
    out = _out(y, tape)
    if _needs(tape, x):
        tape.record(lambda g: (ops.maxpool3d_backward(g, idx),), (x,), out)
    return out


def upsample(x: Tensor5, tape: Optional[Tape] = None) -> Tensor5:
    out = _out(ops.trilinear_upsample(x.data), tape)
    if _needs(tape, x):
        tape.record(lambda g: (ops.trilinear_upsample_backward(g),), (x,), out)
    return out


def concat(tensors: Sequence[Tensor5], tape: Optional[Tape] = None) -> Tensor5:
    y, splits = ops.concat_channels([t.data for t in tensors])
    out = _out(y, tape)
    if _needs(tape, *tensors):
        tape.record(lambda g: ops.split_channels(g, splits), tensors, out)
    return out


def add(a: Tensor5, b: Tensor5, tape: Optional[Tape] = None) -> Tensor5:
    out = _out(ops.add(a.data, b.data), tape)
    if _needs(tape, a, b):
        tape.record(lambda g: (g, g), (a, b), out)
    return out


def sigmoid(x: Tensor5, tape: Optional[Tape] = None) -> Tensor5:
    p = ops.sigmoid(x.data)
    out = _out(p, tape)
    if _needs(tape, x):
        tape.record(lambda g: (g * p * (1 - p),), (x,), out)
    return out
