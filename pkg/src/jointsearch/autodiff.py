"""Dense-tensor reverse-mode automatic differentiation on numpy arrays.

Tensors are plain ``numpy.ndarray`` values. A :class:`Variable` wraps a value
together with its gradient buffer, and a :class:`Tape` records every primitive
applied to variables so that :meth:`Tape.backward` can replay them in reverse.

There is no global state: every op is a method of the tape it records on, so
independent tapes can coexist in one process.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_var_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes cannot be combined."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ParameterSetMismatch(ValueError):
    def __init__(self, only_a: Iterable[str], only_b: Iterable[str]):
        self.only_a = sorted(only_a)
        self.only_b = sorted(only_b)
        super().__init__(
            f"gradients cover different parameter sets: only in first {self.only_a}, "
            f"only in second {self.only_b}"
        )


class Variable:
    """A value that can take part in differentiation.

    Leaf variables (created by the user) own a gradient buffer of the same shape
    as ``value``; variables produced by tape ops do not, their gradients live in
    the tape during a backward pass only.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "tape_id", "id")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: int | None = None
        self.id = next(_var_ids)
        self.grad = np.zeros_like(value) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pad_hw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, ho: int, wo: int):
    r0, c0 = i * dilation, j * dilation
    return xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]


class Tape:
    """Records primitive ops in execution order (which is a topological order)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.id = next(_var_ids)

    def __len__(self) -> int:
        return len(self.entries)

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.op] = counts.get(e.op, 0) + 1
        return counts

    # ------------------------------------------------------------------ plumbing

    def _lift(self, x, like: np.ndarray | None = None) -> Variable:
        if isinstance(x, Variable):
            return x
        arr = np.asarray(x)
        if like is not None:
            arr = arr.astype(like.dtype, copy=False)
        return Variable(arr)

    def _record(self, op: str, inputs: Sequence[Variable], value: np.ndarray, backward) -> Variable:
        out = Variable(value, requires_grad=False)
        out.requires_grad = any(v.requires_grad for v in inputs)
        out.tape_id = self.id
        self.entries.append(TapeEntry(op, tuple(inputs), out, backward))
        return out

    def _propagate(self, loss: Variable) -> dict[int, tuple[Variable, np.ndarray]]:
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.entries:
            raise ValueError("backward called on an empty tape")
        grads = {loss.id: np.ones_like(loss.value)}
        leaves: dict[int, tuple[Variable, np.ndarray]] = {}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output.id, None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape_id == self.id:
                    grads[inp.id] = grads[inp.id] + gi if inp.id in grads else gi
                elif inp.id in leaves:
                    leaves[inp.id] = (inp, leaves[inp.id][1] + gi)
                else:
                    leaves[inp.id] = (inp, gi)
        return leaves

    def backward(self, loss: Variable, retain: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        The tape is cleared afterwards unless ``retain`` is set.
        """
        for var, g in self._propagate(loss).values():
            if var.grad is None:
                var.grad = np.zeros_like(var.value)
            var.grad += g.reshape(var.shape)
        if not retain:
            self.entries.clear()

    def grad(self, loss: Variable, wrt: Mapping[str, Variable], retain: bool = False) -> "Gradients":
        """Gradients of ``loss`` w.r.t. the named variables, without touching ``.grad``.

        Variables the loss does not reach are left out of ``arrays`` (their
        gradient is zero) but stay in ``names``.
        """
        leaves = self._propagate(loss)
        arrays = {}
        for name, var in wrt.items():
            hit = leaves.get(var.id)
            if hit is not None:
                arrays[name] = hit[1].reshape(var.shape)
        if not retain:
            self.entries.clear()
        return Gradients(tuple(wrt), arrays)

    # ------------------------------------------------------------- elementwise

    def identity(self, x: Variable) -> Variable:
        return self._record("identity", (x,), x.value, lambda g: (g,))

    def zero(self, x: Variable, stride: int = 1) -> Variable:
        b, c, h, w = x.shape
        shape = (b, c, -(-h // stride), -(-w // stride))
        return self._record("zero", (x,), np.zeros(shape, dtype=x.dtype), lambda g: (None,))

    def add(self, a, b) -> Variable:
        a = self._lift(a)
        b = self._lift(b, a.value)
        try:
            value = a.value + b.value
        except ValueError:
            raise ShapeError("add", a.shape, b.shape) from None
        sa, sb = a.shape, b.shape
        return self._record("add", (a, b), value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Variable:
        a = self._lift(a)
        b = self._lift(b, a.value)
        try:
            value = a.value - b.value
        except ValueError:
            raise ShapeError("sub", a.shape, b.shape) from None
        sa, sb = a.shape, b.shape
        return self._record("sub", (a, b), value, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Variable:
        a = self._lift(a)
        b = self._lift(b, a.value)
        try:
            value = a.value * b.value
        except ValueError:
            raise ShapeError("mul", a.shape, b.shape) from None
        av, bv = a.value, b.value

        def backward(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

        return self._record("mul", (a, b), value, backward)

    def scale(self, x: Variable, c: float) -> Variable:
        c = x.dtype.type(c)
        return self._record("scale", (x,), x.value * c, lambda g: (g * c,))

    def add_n(self, xs: Sequence[Variable]) -> Variable:
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeError("add_n", shape, x.shape)
        value = xs[0].value.copy()
        for x in xs[1:]:
            value += x.value
        return self._record("add_n", tuple(xs), value, lambda g: (g,) * len(xs))

    def scalar_fn(self, op: str, x: Variable, value: float, grad: np.ndarray) -> Variable:
        """A scalar function of ``x`` whose value and gradient were computed elsewhere."""
        grad = np.asarray(grad, dtype=x.dtype)
        if grad.shape != x.shape:
            raise ShapeError(op, x.shape, grad.shape, detail="gradient")
        return self._record(op, (x,), np.asarray(value, dtype=x.dtype), lambda g: (g * grad,))

    def relu(self, x: Variable) -> Variable:
        mask = x.value > 0
        return self._record("relu", (x,), np.where(mask, x.value, 0).astype(x.dtype), lambda g: (g * mask,))

    def square(self, x: Variable) -> Variable:
        v = x.value
        return self._record("square", (x,), v * v, lambda g: (2 * v * g,))

    def exp(self, x: Variable) -> Variable:
        e = np.exp(x.value)
        return self._record("exp", (x,), e, lambda g: (g * e,))

    def log(self, x: Variable) -> Variable:
        v = x.value
        return self._record("log", (x,), np.log(v), lambda g: (g / v,))

    def sigmoid(self, x: Variable) -> Variable:
        s = 0.5 * (1 + np.tanh(0.5 * x.value))
        return self._record("sigmoid", (x,), s.astype(x.dtype), lambda g: (g * s * (1 - s),))

    def sum(self, x: Variable) -> Variable:
        shape = x.shape
        return self._record("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, x: Variable) -> Variable:
        shape, n = x.shape, x.value.size
        value = np.asarray(x.value.sum() / n, dtype=x.dtype)
        return self._record("mean", (x,), value, lambda g: (np.full(shape, g / n, dtype=x.dtype),))

    def dot(self, a, b) -> Variable:
        """Full contraction ``sum(a * b)`` of two same-shaped tensors."""
        a = self._lift(a)
        b = self._lift(b, a.value)
        if a.shape != b.shape:
            raise ShapeError("dot", a.shape, b.shape)
        av, bv = a.value, b.value
        value = np.asarray(np.vdot(av.ravel(), bv.ravel()), dtype=av.dtype)
        return self._record("dot", (a, b), value, lambda g: (g * bv, g * av))

    # --------------------------------------------------------- indexing/shape

    def take(self, x: Variable, index) -> Variable:
        """Select ``x.value[index]``; repeated indices accumulate in the backward pass."""
        shape, dtype = x.shape, x.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, index, g)
            return (out,)

        return self._record("take", (x,), np.asarray(x.value[index]), backward)

    def reshape(self, x: Variable, shape: tuple) -> Variable:
        old = x.shape
        try:
            value = x.value.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", old, shape) from None
        return self._record("reshape", (x,), value, lambda g: (g.reshape(old),))

    def concat(self, xs: Sequence[Variable], axis: int = 1) -> Variable:
        ref = list(xs[0].shape)
        for x in xs[1:]:
            other = list(x.shape)
            if len(other) != len(ref) or any(
                a != b for k, (a, b) in enumerate(zip(ref, other)) if k != axis % len(ref)
            ):
                raise ShapeError("concat", tuple(ref), tuple(other))
        sizes = [x.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        value = np.concatenate([x.value for x in xs], axis=axis)
        return self._record("concat", tuple(xs), value, lambda g: tuple(np.split(g, splits, axis=axis)))

    def crop(self, x: Variable, top: int, left: int) -> Variable:
        """Drop the first ``top`` rows and ``left`` columns of an NCHW tensor."""
        shape, dtype = x.shape, x.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            out[:, :, top:, left:] = g
            return (out,)

        return self._record("crop", (x,), x.value[:, :, top:, left:], backward)

    def astype(self, x: Variable, dtype) -> Variable:
        src = x.dtype
        return self._record("astype", (x,), x.value.astype(dtype), lambda g: (g.astype(src),))

    def straight_through(self, soft: Variable, hard) -> Variable:
        """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged."""
        hard = np.asarray(hard, dtype=soft.dtype)
        if hard.shape != soft.shape:
            raise ShapeError("straight_through", soft.shape, hard.shape)
        return self._record("straight_through", (soft,), hard, lambda g: (g,))

    # ---------------------------------------------------------- softmax family

    def softmax(self, x: Variable, axis: int = -1) -> Variable:
        z = x.value - x.value.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        return self._record("softmax", (x,), s, backward)

    def log_softmax(self, x: Variable, axis: int = -1) -> Variable:
        z = x.value - x.value.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        s = np.exp(out)

        def backward(g):
            return (g - s * g.sum(axis=axis, keepdims=True),)

        return self._record("log_softmax", (x,), out, backward)

    def cross_entropy(self, logits: Variable, labels: np.ndarray) -> Variable:
        """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
        labels = np.asarray(labels)
        if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError("cross_entropy", logits.shape, labels.shape)
        n = logits.shape[0]
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(n)
        value = np.asarray(-logp[rows, labels].sum() / n, dtype=logits.dtype)
        p = np.exp(logp)

        def backward(g):
            d = p.copy()
            d[rows, labels] -= 1
            return (d * (g / n),)

        return self._record("cross_entropy", (logits,), value, backward)

    # ------------------------------------------------------------ dense layers

    def linear(self, x: Variable, weight: Variable, bias: Variable | None = None) -> Variable:
        if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError("linear", x.shape, weight.shape)
        xv, wv = x.value, weight.value
        value = xv @ wv.T
        inputs = (x, weight)
        if bias is not None:
            if bias.shape != (weight.shape[0],):
                raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
            value = value + bias.value
            inputs = (x, weight, bias)

        def backward(g):
            grads = [g @ wv, g.T @ xv]
            if bias is not None:
                grads.append(g.sum(axis=0))
            return grads

        return self._record("linear", inputs, value, backward)

    def global_avg_pool(self, x: Variable) -> Variable:
        b, c, h, w = x.shape
        inv = x.dtype.type(1.0 / (h * w))
        value = x.value.mean(axis=(2, 3))

        def backward(g):
            return (np.broadcast_to((g * inv)[:, :, None, None], (b, c, h, w)).copy(),)

        return self._record("global_avg_pool", (x,), value, backward)

    # ------------------------------------------------------------ convolutions

    def conv2d(
        self, x: Variable, weight: Variable, stride: int = 1, padding: int = 0, dilation: int = 1
    ) -> Variable:
        """Dense 2-D convolution (cross-correlation), NCHW input, OIHW weight."""
        if x.value.ndim != 4 or weight.value.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError("conv2d", x.shape, weight.shape)
        b, c, h, w = x.shape
        o, _, kh, kw = weight.shape
        ho = _out_size(h, kh, stride, padding, dilation)
        wo = _out_size(w, kw, stride, padding, dilation)
        if ho <= 0 or wo <= 0:
            raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
        xp = _pad_hw(x.value, padding)
        if kh == kw == 1:
            cols = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride].reshape(b, c, ho * wo)
        else:
            cols = np.stack(
                [_window(xp, i, j, dilation, stride, ho, wo) for i in range(kh) for j in range(kw)], axis=2
            ).reshape(b, c * kh * kw, ho * wo)
        wmat = weight.value.reshape(o, -1)
        value = np.matmul(wmat, cols).reshape(b, o, ho, wo)
        wshape = weight.shape

        def backward(g):
            g2 = g.reshape(b, o, ho * wo)
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)
            dcols = np.matmul(wmat.T, g2).reshape(b, c, kh * kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for n, (i, j) in enumerate(itertools.product(range(kh), range(kw))):
                _window(dxp, i, j, dilation, stride, ho, wo)[...] += dcols[:, :, n]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            return dxp, gw

        return self._record("conv2d", (x, weight), value, backward)

    def depthwise_conv2d(
        self, x: Variable, weight: Variable, stride: int = 1, padding: int = 0, dilation: int = 1
    ) -> Variable:
        """Per-channel convolution; ``weight`` has shape (C, kh, kw)."""
        if x.value.ndim != 4 or weight.value.ndim != 3 or x.shape[1] != weight.shape[0]:
            raise ShapeError("depthwise_conv2d", x.shape, weight.shape)
        b, c, h, w = x.shape
        _, kh, kw = weight.shape
        ho = _out_size(h, kh, stride, padding, dilation)
        wo = _out_size(w, kw, stride, padding, dilation)
        xp = _pad_hw(x.value, padding)
        wv = weight.value
        value = np.zeros((b, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                value += _window(xp, i, j, dilation, stride, ho, wo) * wv[None, :, i, j, None, None]

        def backward(g):
            gw = np.empty_like(wv)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    win = _window(xp, i, j, dilation, stride, ho, wo)
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g, win)
                    _window(dxp, i, j, dilation, stride, ho, wo)[...] += g * wv[None, :, i, j, None, None]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            return dxp, gw

        return self._record("depthwise_conv2d", (x, weight), value, backward)

    # ---------------------------------------------------------------- pooling

    def max_pool2d(self, x: Variable, kernel: int = 3, stride: int = 1, padding: int = 1) -> Variable:
        b, c, h, w = x.shape
        ho = _out_size(h, kernel, stride, padding, 1)
        wo = _out_size(w, kernel, stride, padding, 1)
        xp = _pad_hw(x.value, padding, value=-np.inf)
        wins = np.stack(
            [_window(xp, i, j, 1, stride, ho, wo) for i in range(kernel) for j in range(kernel)], axis=0
        )
        arg = wins.argmax(axis=0)
        value = np.take_along_axis(wins, arg[None], axis=0)[0]

        def backward(g):
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for n, (i, j) in enumerate(itertools.product(range(kernel), range(kernel))):
                _window(dxp, i, j, 1, stride, ho, wo)[...] += np.where(arg == n, g, 0)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            return (dxp,)

        return self._record("max_pool2d", (x,), value, backward)

    def avg_pool2d(self, x: Variable, kernel: int = 3, stride: int = 1, padding: int = 1) -> Variable:
        """Average pooling with padded zeros counted in the divisor."""
        b, c, h, w = x.shape
        ho = _out_size(h, kernel, stride, padding, 1)
        wo = _out_size(w, kernel, stride, padding, 1)
        xp = _pad_hw(x.value, padding)
        inv = x.dtype.type(1.0 / (kernel * kernel))
        value = np.zeros((b, c, ho, wo), dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                value += _window(xp, i, j, 1, stride, ho, wo)
        value *= inv

        def backward(g):
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            gs = g * inv
            for i in range(kernel):
                for j in range(kernel):
                    _window(dxp, i, j, 1, stride, ho, wo)[...] += gs
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            return (dxp,)

        return self._record("avg_pool2d", (x,), value, backward)

    # ----------------------------------------------------------- normalization

    def batch_norm(
        self,
        x: Variable,
        gamma: Variable,
        beta: Variable,
        eps: float = 1e-5,
        running: dict | None = None,
        training: bool = True,
        momentum: float = 0.1,
    ) -> Variable:
        """Per-channel batch normalization with affine transform.

        In training mode the batch statistics are used; if ``running`` (a dict
        with ``mean`` and ``var`` arrays) is given it is updated in place. With
        ``training=False`` the running statistics are used instead.
        """
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError("batch_norm", x.shape, gamma.shape)
        xv = x.value
        axes = (0, 2, 3)
        bshape = (1, c, 1, 1)
        gv = gamma.value.reshape(bshape)
        if training:
            mean = xv.mean(axis=axes, keepdims=True)
            xc = xv - mean
            var = (xc * xc).mean(axis=axes, keepdims=True)
            if running is not None:
                n = xv.size // c
                unbiased = var.ravel() * (n / max(n - 1, 1))
                running["mean"] *= 1 - momentum
                running["mean"] += momentum * mean.ravel()
                running["var"] *= 1 - momentum
                running["var"] += momentum * unbiased
        else:
            mean = running["mean"].reshape(bshape).astype(xv.dtype)
            var = running["var"].reshape(bshape).astype(xv.dtype)
            xc = xv - mean
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        value = xhat * gv + beta.value.reshape(bshape)

        def backward(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            gxhat = g * gv
            if training:
                gx = inv_std * (
                    gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std
            return gx, ggamma, gbeta

        return self._record("batch_norm", (x, gamma, beta), value.astype(xv.dtype, copy=False), backward)


@dataclass
class Gradients:
    """A gradient over an ordered, named parameter set.

    ``arrays`` may omit names whose gradient is identically zero.
    """

    names: tuple[str, ...]
    arrays: dict[str, np.ndarray]

    def get(self, name: str) -> np.ndarray | None:
        return self.arrays.get(name)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(a, a)) for a in self.arrays.values())))

    def scaled(self, c: float) -> "Gradients":
        return Gradients(self.names, {k: v * c for k, v in self.arrays.items()})


def grad_dot(a: Gradients, b: Gradients) -> float:
    """Inner product of two gradients over the same parameter set."""
    if set(a.names) != set(b.names):
        sa, sb = set(a.names), set(b.names)
        raise ParameterSetMismatch(sa - sb, sb - sa)
    total = 0.0
    for name in a.names:
        x, y = a.arrays.get(name), b.arrays.get(name)
        if x is None or y is None:
            continue
        total += float(np.vdot(x.ravel().astype(np.float64), y.ravel().astype(np.float64)))
    return total


def mean_gradients(grads: Sequence[Gradients]) -> Gradients:
    """Elementwise mean, summing in list order so the result is order-deterministic."""
    names = grads[0].names
    acc: dict[str, np.ndarray] = {}
    for g in grads:
        if g.names != names:
            raise ParameterSetMismatch(set(g.names) - set(names), set(names) - set(g.names))
        for k, v in g.arrays.items():
            acc[k] = acc[k] + v if k in acc else v.copy()
    n = len(grads)
    return Gradients(names, {k: acc[k] / n for k in names if k in acc})


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)
