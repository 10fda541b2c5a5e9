"""
Differentiable tensor core.

Tensors wrap read-only float64 numpy arrays. Every primitive that receives a
tensor with ``requires_grad`` records a ``Node``; nodes take increasing
sequence numbers as they are built, so sequence order is a topological order
and ``backward`` walks it in reverse.

Graph policy: ``backward`` releases the graph it walked (interior tensors
drop their node) unless ``retain_graph=True``. Leaf gradients accumulate
across calls until ``zero_grad``.
"""

import builtins
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from deepcat.errors import (
    ConfigError,
    DeepCatError,
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

_sequence = itertools.count()

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, *stream)``."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream))
    return np.random.Generator(np.random.PCG64(seq))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in tensor of shape {arr.shape}")


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'node', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or 'tensor')
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional['Node'] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> 'Tensor':
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        grad = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{grad})"


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    inputs: Tuple[Tensor, ...]
    vjp: VJP

    @property
    def input_ids(self) -> List[Optional[int]]:
        return [x.node.seq if x.node is not None else None for x in self.inputs]


@dataclass
class Graph:
    """Nodes reachable from a loss, in construction (topological) order."""
    nodes: List[Tuple[Tensor, Node]]

    @classmethod
    def from_loss(cls, loss: Tensor) -> 'Graph':
        seen = set()
        found: List[Tuple[Tensor, Node]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append((t, t.node))
            stack.extend(t.node.inputs)
        found.sort(key=lambda pair: pair[1].seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)


def apply_op(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap a primitive's output and record its node when any input needs a gradient."""
    _check_finite(out, op)
    t = Tensor._wrap(np.asarray(out, dtype=np.float64))
    if any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = Node(next(_sequence), op, tuple(inputs), vjp)
    return t


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise DeepCatError('backward: loss is not connected to any tensor requiring grad')
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    graph = Graph.from_loss(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: List[Tensor] = []
    for out, node in reversed(graph.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(node.inputs, node.vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            if gx.shape != x.shape:
                raise ShapeError(f"{node.op}: gradient shape {gx.shape} != input shape {x.shape}")
            if x.node is None:
                x.grad = np.array(gx, dtype=np.float64) if x.grad is None else x.grad + gx
                touched.append(x)
            else:
                prev = pending.get(id(x))
                pending[id(x)] = gx if prev is None else prev + gx

    for leaf in touched:
        _check_finite(leaf.grad, f"gradient of {leaf.name or 'leaf'}")
    if not retain_graph:
        for out, _ in graph.nodes:
            out.node = None


# --- primitives ---------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('add', a, b)
    return apply_op('add', a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('sub', a, b)
    return apply_op('sub', a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check('mul', a, b)
    return apply_op('mul', a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op('scale', a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op('matmul', out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    active = x.data > 0
    return apply_op('relu', np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return apply_op('sigmoid', y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    return apply_op('softplus', np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (True = keep) zeroes excluded entries;
    a row with nothing kept comes out all zero."""
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        z = np.where(mask, x.data, -np.inf)
        m = z.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(z - m), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return apply_op('softmax', y, (x,), vjp)


def l2_normalize(x: Tensor) -> Tensor:
    """Rows (last axis) scaled to unit norm; all-zero rows stay zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = np.where(nonzero, x.data / safe, 0.0)

    def vjp(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(nonzero, gx, 0.0),)

    return apply_op('l2_normalize', y, (x,), vjp)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return apply_op('max', out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op('concat', out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Cross-correlation over the sequence axis with zero same-padding.

    x: (B, n, C_in), w: (k, C_in, C_out), b: (C_out,) -> (B, n, C_out)
    """
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1 or x.shape[2] != w.shape[1] or w.shape[2] != b.shape[0]:
        raise ShapeError(f"conv1d: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    batch, n, c_in = x.shape
    k, _, c_out = w.shape
    left = (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (left, k - 1 - left), (0, 0)))
    cols = np.stack([padded[:, j:j + n, :] for j in range(k)], axis=2).reshape(batch, n, k * c_in)
    w_flat = w.data.reshape(k * c_in, c_out)
    out = cols @ w_flat + b.data

    def vjp(g):
        gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(w.shape)
        gb = g.sum(axis=(0, 1))
        gcols = (g @ w_flat.T).reshape(batch, n, k, c_in)
        gpad = np.zeros_like(padded)
        for j in range(k):
            gpad[:, j:j + n, :] += gcols[:, :, j, :]
        return gpad[:, left:left + n, :], gw, gb

    return apply_op('conv1d', out, (x, w, b), vjp)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: kept units are divided by the keep probability."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ConfigError('dropout: training mode needs an explicit rng')
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    return apply_op('dropout', x.data * mask, (x,), lambda g: (g * mask,))


def embedding(table: Tensor, ids: np.ndarray, padding_idx: Optional[int] = None) -> Tensor:
    """Row lookup. The ``padding_idx`` row never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) (min {ids.min()}, max {ids.max()})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        return (gt,)

    return apply_op('embedding', table.data[ids], (table,), vjp)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return apply_op('reshape', out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return apply_op('transpose', np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op('sum', out, (x,), vjp)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


# --- verification -------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
                      kink_tol: Optional[float] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    With ``kink_tol`` set, a mismatching coordinate is left out when it sits
    next to a kink (ReLU at 0, a tie in a max). Two signs are read: the
    central differences at ``eps`` and ``eps / 2`` disagree, or the forward
    and backward one-sided slopes differ and the analytic gradient follows
    one of them. The second catches a point exactly on the kink, where both
    central differences give the same average slope.
    """
    if eps <= 0:
        raise ConfigError(f"finite_diff_check: eps must be > 0, got {eps}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        if out.data.size != 1:
            raise ShapeError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    def shifted(i: int, h: float) -> Tuple[float, float]:
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        return evaluate(plus), evaluate(minus)

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise NonDeterministicError(f"finite_diff_check: f({base.shape}) gave {first!r} then {second!r}")

    x = Tensor(base, requires_grad=True)
    loss = f(x)
    if loss.requires_grad:
        backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    checked = np.ones(base.shape, dtype=bool)
    for i in range(base.size):
        up, down = shifted(i, eps)
        numeric.flat[i] = (up - down) / (2.0 * eps)
        a = analytic.flat[i]
        scale_i = builtins.max(1.0, abs(a))
        if kink_tol is None or abs(a - numeric.flat[i]) / scale_i <= kink_tol:
            continue
        forward, behind = (up - first) / eps, (first - down) / eps
        gap = abs(forward - behind)
        on_kink = gap > kink_tol * scale_i and builtins.min(abs(a - forward), abs(a - behind)) < 0.5 * gap
        up_half, down_half = shifted(i, eps / 2.0)
        half = (up_half - down_half) / eps
        near_kink = abs(half - numeric.flat[i]) > kink_tol * builtins.max(1.0, abs(half))
        if on_kink or near_kink:
            checked.flat[i] = False
    skipped = int((~checked).sum())
    if skipped:
        logger.debug(f"finite_diff_check: skipped {skipped} of {base.size} coordinates near a kink")

    if not checked.any():
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err[checked].max())
