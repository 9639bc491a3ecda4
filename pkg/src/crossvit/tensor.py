"""Minimal reverse-mode autodiff over dense numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result carries a :class:`Node` pointing back at its inputs.  ``backward`` walks
that graph in reverse topological order (the :class:`Tape`).

Op-level cost tallies (multiply-accumulates, elementwise work, attention-map
entries) are collected when a :func:`profile` context is active.
"""
from __future__ import annotations

import builtins
import contextlib
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    need = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = need
    out.node = Node(op, parents, grad_fn) if need else None
    return out


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


# ---------------------------------------------------------------------------
# cost tallies


@dataclass
class Tally:
    """Per-scope op costs gathered by :func:`profile`."""

    macs: dict = field(default_factory=lambda: defaultdict(int))
    elementwise: dict = field(default_factory=lambda: defaultdict(int))
    attn_entries: dict = field(default_factory=lambda: defaultdict(int))
    attn_maps: list = field(default_factory=list)

    def total(self, what: str = "macs") -> int:
        return int(builtins.sum(getattr(self, what).values()))


def _scope() -> str:
    stack = getattr(_state, "scope", None)
    return ".".join(stack) if stack else ""


@contextlib.contextmanager
def scope(name: str):
    """Label costs recorded inside the block (labels nest with dots)."""
    stack = getattr(_state, "scope", None)
    if stack is None:
        stack = _state.scope = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


@contextlib.contextmanager
def profile():
    """Collect a :class:`Tally` of every op executed inside the block."""
    prev = getattr(_state, "tally", None)
    tally = Tally()
    _state.tally = tally
    try:
        yield tally
    finally:
        _state.tally = prev


def _tally() -> Tally | None:
    return getattr(_state, "tally", None)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    t = _tally()
    if t is not None:
        t.macs[_scope()] += out.size * ad.shape[-1]

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, "matmul", (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, "transpose", (x,), lambda g: (np.transpose(g, inv),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); gradients are summed back."""
    src = x.shape
    out = np.broadcast_to(x.data, tuple(shape)).copy()
    return _make(out, "expand", (x,), lambda g: (_unbroadcast(g, src),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of empty list")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(
            p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ValueError(
                f"concat shape mismatch on axis {axis}: {[q.shape for q in parts]}"
            )
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(parts))
        )

    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make(out, "concat", tuple(parts), grad_fn)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along ``axis``."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice [{start}, {stop}) out of range for axis {axis} of size {n}")
    sl = [np.s_[:]] * x.ndim
    sl[ax] = np.s_[start:stop]
    sl = tuple(sl)
    src = x.shape

    def grad_fn(g):
        full = np.zeros(src, dtype=DTYPE)
        full[sl] = g
        return (full,)

    return _make(x.data[sl].copy(), "slice", (x,), grad_fn)


def index(x: Tensor, idx) -> Tensor:
    src = x.shape

    def grad_fn(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx], dtype=DTYPE), "index", (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1, attention: bool = False) -> Tensor:
    """Numerically stable softmax.  ``attention=True`` tallies map entries."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    t = _tally()
    if t is not None:
        t.elementwise[_scope()] += y.size
        if attention:
            t.attn_entries[_scope()] += y.size
            t.attn_maps.append((_scope(), y.shape))

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def grad_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma``/``beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm width mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    t = _tally()
    if t is not None:
        t.elementwise[_scope()] += out.size

    def grad_fn(g):
        gx = g * gd
        dx = inv * (
            gx
            - np.mean(gx, axis=-1, keepdims=True)
            - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), grad_fn)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    th = np.tanh(_GELU_K * (xd + _GELU_C * xd**3))
    out = 0.5 * xd * (1.0 + th)
    t = _tally()
    if t is not None:
        t.elementwise[_scope()] += out.size

    def grad_fn(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _make(out, "gelu", (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """2-D cross-correlation.  x: (B, Cin, H, W), weight: (Cout, Cin, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    b, cin, h, w = x.shape
    cout, _, k, k2 = weight.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output is empty for input {x.shape}, kernel {k}, stride {s}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # (B, Ho, Wo, Cin, k, k) -> rows of length Cin*k*k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    t = _tally()
    if t is not None:
        t.macs[_scope()] += b * ho * wo * cout * cin * k * k

    def grad_fn(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gcols = (gflat @ wmat).reshape(b, ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, p : p + h, p : p + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv2d", parents, grad_fn)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy expects (B, K) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(len(labels)), labels))
    return scale(sum(picked), -1.0 / len(labels))


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Operations reachable from a root, in topological (producer-first) order."""

    nodes: list  # list[Tensor] whose .node is set

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t.node.parents):
                if p.node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` of every leaf tensor with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = tape or Tape.from_root(loss)
    grads: dict = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        pgrads = t.node.backward(g)
        for p, pg in zip(t.node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
