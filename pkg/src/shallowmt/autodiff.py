"""Reverse-mode automatic differentiation over dense float64 tensors.

Every model and loss computation in this package is composed from the ops
defined here. Ops copy their inputs (no aliased views), record a backward
rule on a graph node, and `backward()` replays the tape in reverse
topological order, summing gradient contributions at fan-out points.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (teacher inference, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-dimensional float64 array, optionally on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)  # owns a copy, never a view
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        Tape(self).backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Topologically ordered record of the ops reaching one output tensor.

    Built once from the output's graph and consumed once by `backward`;
    every node's inputs precede it in `self.nodes`.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))
        self.nodes = nodes  # inputs-first order

    def backward(self, root: Tensor, seed: np.ndarray | None = None):
        """Add gradients of `root` into `.grad` of every requires_grad tensor.

        Repeated calls accumulate, which is what gradient accumulation over
        micro-batches relies on.
        """
        if seed is None:
            seed = np.ones_like(root.data)
        if root.node is None:
            if root.requires_grad:
                _accumulate(root, np.asarray(seed, dtype=np.float64))
            return
        grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
        for t in reversed(self.nodes):
            gout = grads.pop(id(t), None)
            if gout is None:
                continue
            for parent, gin in zip(t.node.inputs, t.node.backward_fn(gout)):
                if gin is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    _accumulate(parent, gin)
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    # internal fast path: `data` is always freshly computed, skip the copy
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out.node = None
    if _grad_enabled and any(p.requires_grad for p in inputs):
        out.requires_grad = True
        out.node = _Node(tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), computed without overflow for large |x|
    y = np.logaddexp(0.0, x.data)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * s,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes).copy(), (x,), lambda g: (np.transpose(g, inv),)
    )


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offs[i], offs[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


# ---------------------------------------------------------------------------
# linear algebra and neural-net ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w + b, w is [d_in, d_out].

    Leading axes of x are folded into one GEMM, which is much cheaper than a
    broadcast matmul plus gradient reduction.
    """
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    d_in, d_out = w.shape
    x2 = x.data.reshape(-1, d_in)
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out_shape = x.shape[:-1] + (d_out,)

    if b is None:

        def bw(g):
            g2 = g.reshape(-1, d_out)
            return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

        return _make(y2.reshape(out_shape), (x, w), bw)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _make(y2.reshape(out_shape), (x, w, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        d = x.shape[-1]
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes).reshape(gain.shape)
        dbias = g.sum(axis=reduce_axes).reshape(bias.shape)
        return dx, dgain, dbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup: table [V, D], ids int array [...] -> [... , D]."""
    idx = np.asarray(ids, dtype=np.int64)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[idx], (table,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; draws one mask from `rng` per call when active."""
    if not train or p <= 0.0:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def masked_attention_scores(q: Tensor, k: Tensor, mask) -> Tensor:
    """Scaled dot-product scores q·kᵀ/√d with an additive mask.

    `mask` (Tensor or ndarray, broadcastable to the score shape) holds 0 at
    allowed positions and a large negative constant at forbidden ones, so the
    subsequent softmax gives them exactly zero weight (the shifted exponent
    underflows to 0.0 in float64).
    """
    scores = scale(matmul(q, _swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, mask if isinstance(mask, Tensor) else Tensor(mask))
    return scores


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare analytic gradients of scalar-valued `f` at `x` against
    central differences; returns max over elements of
    |analytic − numeric| / max(1, |analytic|).
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bump = flat.copy()
            bump[i] = flat[i] + eps
            hi = f(Tensor(bump.reshape(x.shape))).item()
            bump[i] = flat[i] - eps
            lo = f(Tensor(bump.reshape(x.shape))).item()
            nflat[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
