"""Parameterized building blocks shared by the supernet and the evaluation network.

Layers register their weights in a flat ``dict[str, Variable]`` under dotted
names and read them back from whatever mapping is passed at call time, so the
same layer object can run with the live weights or with a virtual copy.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tape, Variable

OPS = (
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
    "zero",
)

Params = Mapping[str, Variable]


class Registry:
    """Creates initialized weights into a shared parameter dict."""

    def __init__(self, params: dict[str, Variable], rng: np.random.Generator, dtype=np.float32):
        self.params = params
        self.rng = rng
        self.dtype = dtype

    def _add(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = Variable(value.astype(self.dtype), requires_grad=True, name=name)
        return name

    def conv(self, name: str, c_out: int, c_in: int, k: int) -> str:
        std = np.sqrt(2.0 / (c_in * k * k))
        return self._add(name, self.rng.normal(0.0, std, (c_out, c_in, k, k)))

    def depthwise(self, name: str, c: int, k: int) -> str:
        std = np.sqrt(2.0 / (k * k))
        return self._add(name, self.rng.normal(0.0, std, (c, k, k)))

    def linear(self, name: str, c_out: int, c_in: int) -> tuple[str, str]:
        bound = 1.0 / np.sqrt(c_in)
        w = self._add(name + ".weight", self.rng.uniform(-bound, bound, (c_out, c_in)))
        b = self._add(name + ".bias", np.zeros(c_out))
        return w, b

    def ones(self, name: str, c: int) -> str:
        return self._add(name, np.ones(c))

    def zeros(self, name: str, c: int) -> str:
        return self._add(name, np.zeros(c))


class BatchNorm:
    def __init__(self, reg: Registry, prefix: str, c: int, track_running: bool = False):
        self.gamma = reg.ones(prefix + ".gamma", c)
        self.beta = reg.zeros(prefix + ".beta", c)
        self.running = {"mean": np.zeros(c), "var": np.ones(c)} if track_running else None

    def __call__(self, tape: Tape, params: Params, x: Variable, training: bool = True) -> Variable:
        running = self.running
        if not training and running is None:
            training = True
        return tape.batch_norm(x, params[self.gamma], params[self.beta], running=running, training=training)


class ReLUConvBN:
    def __init__(self, reg: Registry, prefix: str, c_in: int, c_out: int, k: int, stride: int, padding: int, track_running=False):
        self.w = reg.conv(prefix + ".conv", c_out, c_in, k)
        self.bn = BatchNorm(reg, prefix + ".bn", c_out, track_running)
        self.stride, self.padding = stride, padding

    def __call__(self, tape, params, x, training=True):
        y = tape.conv2d(tape.relu(x), params[self.w], stride=self.stride, padding=self.padding)
        return self.bn(tape, params, y, training)


class DilConv:
    """ReLU, depthwise (optionally dilated) conv, pointwise conv, batch norm."""

    def __init__(self, reg, prefix, c_in, c_out, k, stride, padding, dilation, track_running=False):
        self.dw = reg.depthwise(prefix + ".dw", c_in, k)
        self.pw = reg.conv(prefix + ".pw", c_out, c_in, 1)
        self.bn = BatchNorm(reg, prefix + ".bn", c_out, track_running)
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, tape, params, x, training=True):
        y = tape.depthwise_conv2d(
            tape.relu(x), params[self.dw], stride=self.stride, padding=self.padding, dilation=self.dilation
        )
        return self.bn(tape, params, tape.conv2d(y, params[self.pw]), training)


class SepConv:
    """Two stacked :class:`DilConv` blocks without dilation; only the first one strides."""

    def __init__(self, reg, prefix, c_in, c_out, k, stride, padding, track_running=False):
        self.a = DilConv(reg, prefix + ".0", c_in, c_in, k, stride, padding, 1, track_running)
        self.b = DilConv(reg, prefix + ".1", c_in, c_out, k, 1, padding, 1, track_running)

    def __call__(self, tape, params, x, training=True):
        return self.b(tape, params, self.a(tape, params, x, training), training)


class FactorizedReduce:
    """Halves resolution with two offset stride-2 pointwise convs, concatenated."""

    def __init__(self, reg, prefix, c_in, c_out, track_running=False):
        if c_out % 2:
            raise ValueError(f"FactorizedReduce needs an even output width, got {c_out}")
        self.w1 = reg.conv(prefix + ".conv1", c_out // 2, c_in, 1)
        self.w2 = reg.conv(prefix + ".conv2", c_out // 2, c_in, 1)
        self.bn = BatchNorm(reg, prefix + ".bn", c_out, track_running)

    def __call__(self, tape, params, x, training=True):
        x = tape.relu(x)
        a = tape.conv2d(x, params[self.w1], stride=2)
        b = tape.conv2d(tape.crop(x, 1, 1), params[self.w2], stride=2)
        if a.shape != b.shape:
            # odd input sizes: the cropped branch comes up one row/col short
            raise ValueError(f"FactorizedReduce needs even input size, got {x.shape[2:]}")
        return self.bn(tape, params, tape.concat([a, b], axis=1), training)


class Pool:
    def __init__(self, kind: str, stride: int):
        self.kind, self.stride = kind, stride

    def __call__(self, tape, params, x, training=True):
        if self.kind == "max":
            return tape.max_pool2d(x, 3, stride=self.stride, padding=1)
        return tape.avg_pool2d(x, 3, stride=self.stride, padding=1)


class Identity:
    def __call__(self, tape, params, x, training=True):
        return tape.identity(x)


class Zero:
    def __init__(self, stride: int):
        self.stride = stride

    def __call__(self, tape, params, x, training=True):
        return tape.zero(x, self.stride)


def make_op(name: str, reg: Registry, prefix: str, c: int, stride: int, track_running: bool = False):
    """Candidate operation ``name`` mapping ``c`` channels to ``c`` channels."""
    if name == "sep_conv_3x3":
        return SepConv(reg, prefix, c, c, 3, stride, 1, track_running)
    if name == "sep_conv_5x5":
        return SepConv(reg, prefix, c, c, 5, stride, 2, track_running)
    if name == "dil_conv_3x3":
        return DilConv(reg, prefix, c, c, 3, stride, 2, 2, track_running)
    if name == "dil_conv_5x5":
        return DilConv(reg, prefix, c, c, 5, stride, 4, 2, track_running)
    if name == "max_pool_3x3":
        return Pool("max", stride)
    if name == "avg_pool_3x3":
        return Pool("avg", stride)
    if name == "identity":
        return Identity() if stride == 1 else FactorizedReduce(reg, prefix, c, c, track_running)
    if name == "zero":
        return Zero(stride)
    raise KeyError(f"unknown operation {name!r}")


def cell_edges(steps: int) -> list[tuple[int, int]]:
    """Ordered (source, destination) pairs; nodes 0 and 1 are the cell inputs."""
    return [(i, j) for j in range(2, steps + 2) for i in range(j)]


def node_slices(steps: int) -> list[slice]:
    """Slice of :func:`cell_edges` holding the incoming edges of each intermediate node."""
    out, start = [], 0
    for j in range(2, steps + 2):
        out.append(slice(start, start + j))
        start += j
    return out


def reduction_layers(layers: int) -> tuple[int, ...]:
    return (layers // 3, 2 * layers // 3)
