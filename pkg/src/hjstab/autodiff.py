"""Reverse-mode automatic differentiation on a recorded tape.

Values are float64 numpy arrays with numpy broadcasting.  Operations are
recorded only while a :class:`Tape` is active on the current thread; outside
a tape every operation is a plain array computation, which is what the
evaluation and probing paths use.

Kinks (``ramp`` at 0, ``clamp`` at its bounds, ``sqrt`` and ``norm2`` at 0)
receive a zero subgradient.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "dot",
    "sqnorm",
    "norm2",
    "tsum",
    "mean",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
    "ramp",
    "clamp",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "square",
    "where",
    "stop_gradient",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of operations; use as a context manager.

    Every node stores the ids of its parents and a vector-Jacobian product
    closure.  Parents always precede their consumers because nodes are
    appended in evaluation order.
    """

    def __init__(self) -> None:
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.shapes: list[tuple[int, ...]] = []
        self.kinds: list[str] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.parents)

    def _record(self, kind: str, shape: tuple[int, ...], parents: tuple[int, ...], vjp) -> int:
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(shape)
        self.kinds.append(kind)
        return len(self.parents) - 1

    def leaf(self, value, name: str = "leaf") -> "Tensor":
        """Create a tracked leaf tensor on this tape."""
        arr = _to_array(value)
        node = self._record(name, arr.shape, (), None)
        return Tensor(arr, _node=node, _tape=self)


class Tensor:
    """A float64 array plus an optional handle on a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, _node: int | None = None, _tape: Tape | None = None) -> None:
        self.data = _to_array(data)
        self.node = _node
        self.tape = _tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(shape):
    raise ShapeError(f"expected a scalar tensor, got shape {shape}")


def _to_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {kind}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a forward value, recording it when any input is tracked."""
    _check_finite(kind, out)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node for t in inputs if t.node is not None and t.tape is tape)
    if not parents:
        return Tensor(out)
    mask = tuple(t.node is not None and t.tape is tape for t in inputs)

    def _vjp(g, _mask=mask, _vjp=vjp):
        gs = _vjp(g)
        return tuple(gi for gi, m in zip(gs, _mask) if m)

    node = tape._record(kind, out.shape, parents, _vjp)
    return Tensor(out, _node=node, _tape=tape)


def _binary_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data
    with np.errstate(over="ignore"):
        value = ad * bd
    return _make(
        "mul", value, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(over="ignore"):
        out = ad * ad
    return _make("square", out, (a,), lambda g: (2.0 * ad * g,))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics, including 1-D promotion and batching."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError("matmul does not accept scalars")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform") from exc

    def vjp(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = np.squeeze(ga, -2)
        if bd.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", np.asarray(out, dtype=np.float64), (a, b), vjp)


def dot(a, b) -> Tensor:
    """Inner product over the last axis (batched)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last axes differ, {a.shape} vs {b.shape}")
    return tsum(mul(a, b), axis=-1)


def sqnorm(a) -> Tensor:
    """Squared Euclidean norm over the last axis."""
    return tsum(square(a), axis=-1)


def norm2(a) -> Tensor:
    """Euclidean norm over the last axis; zero subgradient at the origin."""
    return sqrt(sqnorm(a))


# -- reductions and shape ops ---------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data[index], dtype=np.float64)

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    n = len(ts)
    return _make("stack", out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)))


# -- nonlinearities ---------------------------------------------------------------


def ramp(x) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make("ramp", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """min(max(x, lo), hi); gradient 1 strictly inside (lo, hi), else 0."""
    lo_arr, hi_arr = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if np.any(lo_arr > hi_arr):
        raise ValueError(f"clamp: lower bound {lo} exceeds upper bound {hi}")
    x = as_tensor(x)
    inside = (x.data > lo_arr) & (x.data < hi_arr)
    out = np.minimum(np.maximum(x.data, lo_arr), hi_arr)
    return _make("clamp", out, (x,), lambda g: (g * inside,))


def sqrt(x) -> Tensor:
    """Square root; the gradient at 0 is taken as 0."""
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / out, 0.0)
        return (g * d,)

    return _make("sqrt", out, (x,), vjp)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    sig = np.exp(-np.logaddexp(0.0, -xd))
    return _make("softplus", out, (x,), lambda g: (g * sig,))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(
        "where",
        np.asarray(out, dtype=np.float64),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def stop_gradient(x) -> Tensor:
    """Identity forward; contributes nothing backward."""
    return Tensor(as_tensor(x).data)


# -- backward ---------------------------------------------------------------------


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every leaf on ``tape``.

    The returned mapping is keyed by leaf node id.  Leaves that do not
    influence the output get a zero array.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    leaves = [i for i, p in enumerate(tape.parents) if tape.vjps[i] is None]
    grads: list[np.ndarray | None] = [None] * len(tape.parents)
    if output.node is None or output.tape is not tape:
        return {i: np.zeros(tape.shapes[i]) for i in leaves}
    grads[output.node] = np.ones(tape.shapes[output.node])
    for i in range(output.node, -1, -1):
        g = grads[i]
        vjp = tape.vjps[i]
        if g is None or vjp is None:
            continue
        for pid, pg in zip(tape.parents[i], vjp(g)):
            if grads[pid] is None:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[pid] += pg
        if i != output.node:
            grads[i] = None if tape.vjps[i] is not None else g
    out = {}
    for i in leaves:
        g = grads[i]
        g = np.zeros(tape.shapes[i]) if g is None else g.reshape(tape.shapes[i])
        _check_finite(f"gradient of leaf {i}", g)
        out[i] = g
    return out


def grad(output: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Convenience wrapper returning gradients aligned with ``leaves``."""
    leaves = list(leaves)
    if not leaves:
        return []
    tape = leaves[0].tape
    if tape is None:
        raise ValueError("leaves are not tracked on a tape")
    gmap = backward(tape, output)
    return [gmap[leaf.node] for leaf in leaves]
