"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records primitive operations as they are evaluated. Each
recorded node keeps its op kind, parent node ids, static attributes and the
cached output, so the same tape can be replayed with new leaf bindings
(:meth:`Tape.forward_eval`) and differentiated (:meth:`Tape.gradient`).

Everything is float64. Tapes are cheap and meant to be rebuilt for every
attack or training step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operands."""

    def __init__(self, node_id: int, op: str, detail: str):
        super().__init__(f"node {node_id} ({op}): {detail}")
        self.node_id = node_id
        self.op = op


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool = False


class Var:
    """Handle to a node on a tape. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.value.shape})"

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("mul", self, other)
        if np.ndim(other) == 0:
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, self.tape.const(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.ndim(other) == 0 and not isinstance(other, Var):
            return self.tape.apply("scale", self, c=1.0 / float(other))
        raise TypeError("division is only supported by scalar constants")

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", self._lift(other), self)

    def __getitem__(self, key):
        return self.tape.apply("getitem", self, key=key)


# ---------------------------------------------------------------- primitives

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = -softplus(-x), evaluated without overflow
    return -np.logaddexp(0.0, -x)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


_RMS_EPS = 1e-6


def _axes_T(nd: int) -> tuple[int, ...]:
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _matmul_backward(g, out, a, b, needs=(True, True)):
    if b.ndim == 1:
        ga = g[..., None] * b
        gb = np.einsum("...i,...ij->j", g, a) if a.ndim > 1 else g * a
        return ga, gb
    ga = _unbroadcast(g @ np.transpose(b, _axes_T(b.ndim)), a.shape) if needs[0] else None
    gb = _unbroadcast(np.transpose(a, _axes_T(a.ndim)) @ g, b.shape) if needs[1] else None
    return ga, gb


def _sum_backward(g, out, x, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _mean_backward(g, out, x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    (gx,) = _sum_backward(g, out, x, axis=axis, keepdims=keepdims)
    return (gx / count,)


def _getitem_backward(g, out, x, key):
    gx = np.zeros_like(x)
    np.add.at(gx, key, g)
    return (gx,)


def _concat_backward(g, out, *xs, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _take_backward(g, out, x, idx, axis=0):
    gx = np.zeros_like(x)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
    return gx, None


def _take_rows_backward(g, out, x, idx):
    gx = np.zeros_like(x)
    rows = np.arange(x.shape[0])[:, None]
    np.add.at(gx, (rows, idx), g)
    return gx, None


def _rmsnorm_forward(x):
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + _RMS_EPS)
    return x / r


def _rmsnorm_backward(g, out, x):
    d = x.shape[-1]
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + _RMS_EPS)
    y = x / r
    return ((g - y * (g * y).sum(axis=-1, keepdims=True) / d) / r,)


def _softmax_backward(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_softmax_backward(g, out, x):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _clip_forward(x, lo, hi):
    return np.clip(x, lo, hi)


def _clip_backward(g, out, x, lo, hi):
    # straight-through inside the interval, zero outside
    return (g * ((x >= lo) & (x <= hi)),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: a + b,
            lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (lambda a, b: a - b,
            lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": (lambda a, b: a * b,
            lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "scale": (lambda x, c: x * c, lambda g, o, x, c: (g * c,)),
    "matmul": (np.matmul, _matmul_backward),
    "softmax": (_softmax, _softmax_backward),
    "log_softmax": (_log_softmax_forward, _log_softmax_backward),
    "log_sigmoid": (_log_sigmoid, lambda g, o, x: (g * (1.0 - np.exp(o)),)),
    "gelu": (_gelu, lambda g, o, x: (g * _gelu_grad(x),)),
    "rmsnorm": (_rmsnorm_forward, _rmsnorm_backward),
    "sum": (lambda x, axis=None, keepdims=False: np.asarray(x.sum(axis=axis, keepdims=keepdims)),
            _sum_backward),
    "mean": (lambda x, axis=None, keepdims=False: np.asarray(x.mean(axis=axis, keepdims=keepdims)),
             _mean_backward),
    "sq_norm": (lambda x, axis=None: np.asarray((x * x).sum(axis=axis)),
                lambda g, o, x, axis=None: (2.0 * x * (g if axis is None else np.expand_dims(g, axis)),)),
    "getitem": (lambda x, key: np.array(x[key]), _getitem_backward),
    "concat": (lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_backward),
    "take": (lambda x, idx, axis=0: np.take(x, idx, axis=axis), _take_backward),
    "take_rows": (lambda x, idx: x[np.arange(x.shape[0])[:, None], idx], _take_rows_backward),
    "reshape": (lambda x, shape: x.reshape(shape), lambda g, o, x, shape: (g.reshape(x.shape),)),
    "transpose": (lambda x, axes: np.transpose(x, axes),
                  lambda g, o, x, axes: (np.transpose(g, np.argsort(axes)),)),
    "clip": (_clip_forward, _clip_backward),
}

# ops whose trailing positional operands are integer index arrays, not differentiable inputs
_INDEX_OPS = {"take", "take_rows"}
# backward rules that accept a ``needs`` flag per parent and skip unneeded work
_NEEDS_AWARE = {"matmul"}


class Tape:
    """Ordered record of evaluated primitives.

    With ``record=False`` nothing is kept: ops evaluate eagerly and the tape
    can be neither replayed nor differentiated (inference mode).
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> Var:
        if not self.record:
            return Var(self, -1, node.value)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1, node.value)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        return self._push(Node("leaf", (), {}, arr, requires_grad))

    def const(self, value) -> Var:
        arr = np.asarray(value)
        if arr.dtype.kind not in "iub":
            arr = arr.astype(np.float64, copy=False)
        return self._push(Node("const", (), {}, arr, False))

    def apply(self, op: str, *parents: Var, **attrs) -> Var:
        if op not in OPS:
            raise KeyError(f"unknown primitive {op!r}")
        node_id = len(self.nodes)
        vals = [p.value for p in parents]
        try:
            out = OPS[op][0](*vals, **attrs)
        except (ValueError, IndexError) as exc:
            raise ShapeError(node_id, op, str(exc)) from None
        req = self.record and any(self.nodes[p.id].requires_grad for p in parents)
        return self._push(Node(op, tuple(p.id for p in parents), attrs, np.asarray(out), req))

    def _require_record(self) -> None:
        if not self.record:
            raise RuntimeError("tape was created with record=False")

    def forward_eval(self, bindings: dict | None = None, upto: Var | None = None) -> list[np.ndarray]:
        """Replay the tape with some leaves rebound; returns all node values.

        Leaves not in ``bindings`` keep their recorded value. Replay stops at
        ``upto`` when given.
        """
        self._require_record()
        bindings = {(k.id if isinstance(k, Var) else k): v for k, v in (bindings or {}).items()}
        stop = len(self.nodes) if upto is None else upto.id + 1
        values: list[np.ndarray] = []
        for node_id in range(stop):
            node = self.nodes[node_id]
            if node.op in ("leaf", "const"):
                if node_id in bindings:
                    new = np.asarray(bindings[node_id], dtype=node.value.dtype)
                    if new.shape != node.value.shape:
                        raise ShapeError(node_id, node.op,
                                         f"bound shape {new.shape} != recorded {node.value.shape}")
                    values.append(new)
                else:
                    values.append(node.value)
                continue
            try:
                values.append(np.asarray(OPS[node.op][0](*(values[p] for p in node.parents), **node.attrs)))
            except (ValueError, IndexError) as exc:
                raise ShapeError(node_id, node.op, str(exc)) from None
        return values

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to each leaf in ``wrt``."""
        self._require_record()
        if loss.value.size != 1:
            raise ValueError(f"gradient needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        lowest = min((w.id for w in wrt), default=0)
        for node_id in range(loss.id, lowest - 1, -1):
            g = grads.get(node_id)
            node = self.nodes[node_id]
            if g is None or not node.parents:
                continue
            parent_vals = [self.nodes[p].value for p in node.parents]
            attrs = node.attrs
            if node.op in _NEEDS_AWARE:
                attrs = dict(attrs, needs=tuple(self.nodes[p].requires_grad for p in node.parents))
            pgrads = OPS[node.op][1](g, node.value, *parent_vals, **attrs)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return [grads.get(w.id, np.zeros_like(w.value)) for w in wrt]


# ------------------------------------------------------- functional wrappers

def softmax(x: Var) -> Var:
    return x.tape.apply("softmax", x)


def log_softmax(x: Var) -> Var:
    return x.tape.apply("log_softmax", x)


def log_sigmoid(x: Var) -> Var:
    return x.tape.apply("log_sigmoid", x)


def gelu(x: Var) -> Var:
    return x.tape.apply("gelu", x)


def rmsnorm(x: Var) -> Var:
    return x.tape.apply("rmsnorm", x)


def vsum(x: Var, axis=None, keepdims: bool = False) -> Var:
    return x.tape.apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    return x.tape.apply("mean", x, axis=axis, keepdims=keepdims)


def squared_norm(x: Var, axis=None) -> Var:
    return x.tape.apply("sq_norm", x, axis=axis)


def concat(xs: Iterable[Var], axis: int = 0) -> Var:
    xs = list(xs)
    return xs[0].tape.apply("concat", *xs, axis=axis)


def take(x: Var, idx, axis: int = 0) -> Var:
    idx = np.asarray(idx)
    if idx.ndim > 1 and axis != 0:
        raise ValueError("multi-dimensional indices are only supported along axis 0")
    return x.tape.apply("take", x, x.tape.const(np.asarray(idx, dtype=np.int64)), axis=axis)


def take_rows(x: Var, idx) -> Var:
    """Per-batch gather: ``out[b, j] = x[b, idx[b, j]]``."""
    return x.tape.apply("take_rows", x, x.tape.const(np.asarray(idx, dtype=np.int64)))


def reshape(x: Var, shape) -> Var:
    return x.tape.apply("reshape", x, shape=tuple(shape))


def transpose(x: Var, axes) -> Var:
    return x.tape.apply("transpose", x, axes=tuple(axes))


def clip(x: Var, lo: float, hi: float) -> Var:
    return x.tape.apply("clip", x, lo=lo, hi=hi)


# ------------------------------------------------------------ verification

@dataclass
class GradCheck:
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def finite_difference_check(loss: Var, leaf: Var, step: float = 1e-5,
                            entries: np.ndarray | None = None) -> GradCheck:
    """Compare the tape gradient of ``loss`` w.r.t. ``leaf`` to central differences.

    The error is normwise: ``max |analytic - numeric| / max(max |analytic|, 1e-8)``
    over the checked entries (all of them unless ``entries`` lists flat
    indices). Entries whose true gradient is ~0 would otherwise be judged
    on round-off alone.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    tape = loss.tape
    (analytic,) = tape.gradient(loss, [leaf])
    base = leaf.value
    flat_idx = np.arange(base.size) if entries is None else np.asarray(entries)
    numeric = np.zeros(base.size)
    for i in flat_idx:
        bumped = base.copy().reshape(-1)
        bumped[i] += step
        up = tape.forward_eval({leaf: bumped.reshape(base.shape)}, upto=loss)[loss.id]
        bumped[i] -= 2 * step
        down = tape.forward_eval({leaf: bumped.reshape(base.shape)}, upto=loss)[loss.id]
        numeric[i] = (float(up) - float(down)) / (2 * step)
    a = analytic.reshape(-1)[flat_idx]
    n = numeric[flat_idx]
    if a.size == 0:
        return GradCheck(0.0, analytic, numeric.reshape(base.shape))
    err = float(np.abs(a - n).max() / max(float(np.abs(a).max()), 1e-8))
    return GradCheck(err, analytic, numeric.reshape(base.shape))
