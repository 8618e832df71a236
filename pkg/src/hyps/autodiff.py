"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive in execution order, so the node list
is topologically sorted by construction and ``backward`` is a single reverse
walk. Leaves created from a frozen :class:`Parameter` carry no gradient and
any node whose inputs are all gradient-free is recorded without a VJP.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError, UsageError

LN_EPS = 1e-5
DICE_EPS = 1e-5


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = False

    @property
    def size(self) -> int:
        return int(self.value.size)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple] | None


class Var:
    __slots__ = ("tape", "idx", "value", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return add(self, scale(other, -1.0))
        return add(self, -_val(other))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.value.shape})"


@dataclass
class Tape:
    """Linear record of primitive applications.

    ``grad_enabled=False`` turns the tape into a plain evaluator: values are
    computed but no VJPs are kept.
    """

    grad_enabled: bool = True
    nodes: list[Node] = field(default_factory=list)
    _n: int = 0
    _params: dict[int, Parameter] = field(default_factory=dict)
    relu_masks: list[np.ndarray] | None = None

    def _new_id(self) -> int:
        self._n += 1
        return self._n - 1

    def const(self, value) -> Var:
        return Var(self, self._new_id(), np.asarray(value, dtype=np.float64), False)

    def param(self, p: Parameter) -> Var:
        rg = self.grad_enabled and p.trainable
        v = Var(self, self._new_id(), p.value, rg)
        if rg:
            self._params[v.idx] = p
        return v

    def record(self, op: str, value: np.ndarray, inputs: tuple, vjp) -> Var:
        rg = self.grad_enabled and any(isinstance(x, Var) and x.requires_grad for x in inputs)
        out = Var(self, self._new_id(), value, rg)
        if rg:
            ids = tuple(x.idx if isinstance(x, Var) else -1 for x in inputs)
            self.nodes.append(Node(op, ids, out.idx, vjp))
        return out

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every trainable parameter used."""
        if loss.tape is not self:
            raise UsageError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                if i < 0 or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out: dict[str, np.ndarray] = {}
        for idx, p in self._params.items():
            g = grads.get(idx)
            if g is None:
                g = np.zeros_like(p.value)
            if p.name in out:
                out[p.name] = out[p.name] + g
            else:
                out[p.name] = g
        return out


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = av + bv
    return _tape_of(a, b).record(
        "add", out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _tape_of(a, b).record(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, s: float) -> Var:
    return _tape_of(a).record("scale", _val(a) * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting semantics."""
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"cannot multiply {av.shape} by {bv.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _tape_of(a, b).record("matmul", av @ bv, (a, b), vjp)


def linear(x, w, b=None) -> Var:
    """``x @ w.T (+ b)`` over the last axis of ``x``; ``w`` is (out, in)."""
    xv, wv = _val(x), _val(w)
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear: input {xv.shape} incompatible with weight {wv.shape}")
    out = xv @ wv.T
    if b is not None:
        out = out + _val(b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv
        gw = g2.T @ xv.reshape(-1, xv.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _tape_of(x, w, b).record("linear", out, (x, w, b), vjp)


def relu(x) -> Var:
    xv = _val(x)
    mask = xv > 0
    tape = _tape_of(x)
    if tape.relu_masks is not None:
        tape.relu_masks.append(mask)
    return tape.record("relu", np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Var:
    xv = _val(x)
    y = np.empty_like(xv)
    pos = xv >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _tape_of(x).record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x) -> Var:
    """Softmax over the last axis."""
    xv = _val(x)
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _tape_of(x).record("softmax", y, (x,), vjp)


def layer_norm(x, gamma, beta) -> Var:
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    out = xhat * gv + bv
    d = xv.shape[-1]

    def vjp(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _tape_of(x, gamma, beta).record("layer_norm", out, (x, gamma, beta), vjp)


def reshape(x, shape) -> Var:
    xv = _val(x)
    return _tape_of(x).record("reshape", xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes) -> Var:
    inv = np.argsort(axes)
    return _tape_of(x).record(
        "transpose", np.transpose(_val(x), axes), (x,), lambda g: (np.transpose(g, inv),)
    )


def roll(x, shift, axis) -> Var:
    """Cyclic shift (``numpy.roll``); the VJP is the inverse shift."""
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _tape_of(x).record(
        "roll", np.roll(_val(x), shift, axis), (x,), lambda g: (np.roll(g, neg, axis),)
    )


def upsample_nearest(x, factor: int, axes: tuple[int, ...]) -> Var:
    """Nearest-neighbour upsampling by an integer factor along ``axes``."""
    xv = _val(x)
    out = xv
    for ax in axes:
        out = np.repeat(out, factor, axis=ax)

    def vjp(g):
        shape = []
        sum_axes = []
        for ax, n in enumerate(xv.shape):
            if ax in axes:
                shape += [n, factor]
                sum_axes.append(len(shape) - 1)
            else:
                shape.append(n)
        return (g.reshape(shape).sum(axis=tuple(sum_axes)),)

    return _tape_of(x).record("upsample", out, (x,), vjp)


def total(x) -> Var:
    xv = _val(x)
    return _tape_of(x).record("sum", np.array(xv.sum()), (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def dice_loss(pred, target, eps: float = DICE_EPS) -> Var:
    """Soft Dice loss, -mean_n (2 sum(Y*P) + eps) / (sum(Y) + sum(P) + eps).

    The leading axis is the batch; all other axes are summed per sample.
    """
    pv = _val(pred)
    tv = np.asarray(_val(target), dtype=np.float64)
    if pv.shape != tv.shape:
        raise ShapeError(f"dice_loss: prediction {pv.shape} vs target {tv.shape}")
    if pv.ndim < 1 or pv.shape[0] < 1:
        raise ShapeError("dice_loss needs a non-empty batch axis")
    n = pv.shape[0]
    axes = tuple(range(1, pv.ndim))
    inter = (pv * tv).sum(axis=axes)
    denom = tv.sum(axis=axes) + pv.sum(axis=axes) + eps
    num = 2.0 * inter + eps
    loss = -(num / denom).mean()

    def vjp(g):
        shp = (n,) + (1,) * len(axes)
        d = denom.reshape(shp)
        dr = (2.0 * tv * d - num.reshape(shp)) / (d * d)
        return (-g * dr / n, None)

    return _tape_of(pred).record("dice_loss", np.array(loss), (pred, target), vjp)
