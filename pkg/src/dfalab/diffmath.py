"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every primitive operation as it runs (define-by-run);
``backward`` replays the records in reverse, applying each operation's
vector-Jacobian rule and summing gradients across fan-out. Tapes are cheap
and rebuilt per training step. A tape and its tensors belong to one thread;
independent tapes may run concurrently.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes, a scalar, or an operand whose shape equals the other's trailing dims
(broadcast over leading batch axes only). Anything else is a shape error.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "forward_op",
    "FORWARD_OPS",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat_cols",
    "slice_cols",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "absolute",
    "softmax",
    "log_softmax",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; training must halt loudly."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class _Node:
    __slots__ = ("value", "parents", "vjp", "is_leaf")

    def __init__(self, value: np.ndarray, parents: tuple[int, ...],
                 vjp: Callable | None, is_leaf: bool):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.is_leaf = is_leaf


class Tensor:
    """Dense float64 array, optionally attached to a tape node.

    Detached tensors (``tape is None``) are plain value carriers, e.g.
    gradients returned by ``backward``.
    """

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.value = _as_array(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def flat_values(self) -> list[float]:
        """Row-major flat copy of the values."""
        return self.value.ravel().tolist()

    def __repr__(self):
        tag = "" if self.tape is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if self.tape is None:
            raise ValueError("cannot operate on a detached tensor")
        return self.tape.leaf(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __neg__(self):
        return mul(self, self._lift(-1.0))


class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> Tensor:
        """Record an input node (parameter, data, or constant)."""
        arr = _as_array(value)
        if not np.isfinite(arr).all():
            raise NonFiniteError("leaf tensor contains NaN or Inf")
        return self._push(arr, (), None, is_leaf=True)

    def _push(self, value: np.ndarray, parents: tuple[int, ...],
              vjp: Callable | None, is_leaf: bool = False) -> Tensor:
        node_id = len(self._nodes)
        self._nodes.append(_Node(value, parents, vjp, is_leaf))
        return Tensor(value, self, node_id)


def _record(name: str, tape: Tape, value: np.ndarray,
            parents: tuple[int, ...], vjp: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{name}: non-finite output")
    return tape._push(value, parents, vjp)


def _same_tape(name: str, tensors: Sequence[Tensor]) -> Tape:
    tape = tensors[0].tape
    if tape is None:
        raise ValueError(f"{name}: tensor is not attached to a tape")
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError(f"{name}: operands live on different tapes")
    return tape


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(f"{name}: shapes {sa} and {sb} do not match "
                     "(only leading-batch-axis broadcasting is allowed)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", (a, b))
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _record("add", tape, a.value + b.value, (a.node_id, b.node_id), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("sub", (a, b))
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _record("sub", tape, a.value - b.value, (a.node_id, b.node_id), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("mul", (a, b))
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _reduce_to(g * bv, sa), _reduce_to(g * av, sb)

    return _record("mul", tape, av * bv, (a.node_id, b.node_id), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("matmul", (a, b))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", tape, av @ bv, (a.node_id, b.node_id), vjp)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ValueError("concat_cols: need at least one tensor")
    tape = _same_tape("concat_cols", tensors)
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat_cols: leading dims differ: "
                             f"{tensors[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    value = np.concatenate([t.value for t in tensors], axis=-1)
    return _record("concat_cols", tape, value,
                   tuple(t.node_id for t in tensors), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the last axis."""
    tape = _same_tape("slice_cols", (a,))
    width = a.shape[-1]
    if not (0 <= start <= stop <= width):
        raise ValueError(f"slice_cols: [{start}, {stop}) out of range "
                         f"for last axis of shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[..., start:stop] = g
        return (out,)

    return _record("slice_cols", tape, a.value[..., start:stop].copy(),
                   (a.node_id,), vjp)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis=None) or over the last axis (axis=-1)."""
    tape = _same_tape("reduce_sum", (a,))
    if axis not in (None, -1):
        raise ValueError("reduce_sum: axis must be None or -1")
    shape = a.shape

    if axis is None:
        def vjp(g):
            return (np.broadcast_to(g, shape).copy(),)
        value = a.value.sum()
    else:
        def vjp(g):
            return (np.broadcast_to(g[..., None], shape).copy(),)
        value = a.value.sum(axis=-1)
    return _record("reduce_sum", tape, np.asarray(value), (a.node_id,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements (axis=None) or over the last axis (axis=-1)."""
    tape = _same_tape("reduce_mean", (a,))
    if axis not in (None, -1):
        raise ValueError("reduce_mean: axis must be None or -1")
    shape = a.shape
    n = a.size if axis is None else shape[-1]
    if n == 0:
        raise ValueError("reduce_mean: empty tensor")

    if axis is None:
        def vjp(g):
            return (np.broadcast_to(g / n, shape).copy(),)
        value = a.value.mean()
    else:
        def vjp(g):
            return (np.broadcast_to(g[..., None] / n, shape).copy(),)
        value = a.value.mean(axis=-1)
    return _record("reduce_mean", tape, np.asarray(value), (a.node_id,), vjp)


def relu(a: Tensor) -> Tensor:
    tape = _same_tape("relu", (a,))
    av = a.value

    def vjp(g):
        return (g * (av > 0.0),)

    return _record("relu", tape, np.maximum(av, 0.0), (a.node_id,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    tape = _same_tape("sigmoid", (a,))
    x = a.value
    with np.errstate(over="ignore"):
        y = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-x)),
                     np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", tape, y, (a.node_id,), vjp)


def tanh(a: Tensor) -> Tensor:
    tape = _same_tape("tanh", (a,))
    y = np.tanh(a.value)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", tape, y, (a.node_id,), vjp)


def exp(a: Tensor) -> Tensor:
    tape = _same_tape("exp", (a,))
    with np.errstate(over="ignore"):
        y = np.exp(a.value)

    def vjp(g):
        return (g * y,)

    return _record("exp", tape, y, (a.node_id,), vjp)


def log(a: Tensor) -> Tensor:
    tape = _same_tape("log", (a,))
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(av)

    def vjp(g):
        return (g / av,)

    return _record("log", tape, y, (a.node_id,), vjp)


def absolute(a: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    tape = _same_tape("absolute", (a,))
    av = a.value

    def vjp(g):
        return (g * np.sign(av),)

    return _record("absolute", tape, np.abs(av), (a.node_id,), vjp)


def _softmax_values(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; output rows sum to 1."""
    tape = _same_tape("softmax", (a,))
    y = _softmax_values(a.value)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", tape, y, (a.node_id,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    tape = _same_tape("log_softmax", (a,))
    x = a.value
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", tape, y, (a.node_id,), vjp)


FORWARD_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "concat_last_axis": lambda *ts: concat_cols(ts),
    "slice": slice_cols,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "softmax_last_axis": softmax,
    "log_softmax_last_axis": log_softmax,
}


def forward_op(kind: str, *inputs: Tensor, **kwargs) -> Tensor:
    """Dispatch a primitive by name; see FORWARD_OPS for the op set."""
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns {leaf node id -> gradient}.

    Gradients sum across fan-out. Leaves not reachable from the loss get
    zero gradients of their own shape.
    """
    if loss.tape is not tape:
        raise ValueError("backward: loss was not produced on this tape")
    if loss.value.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    nodes = tape._nodes
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    for nid in range(loss.node_id, -1, -1):
        node = nodes[nid]
        if node.is_leaf:
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    out: dict[int, Tensor] = {}
    for nid, node in enumerate(nodes):
        if node.is_leaf:
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(node.value)
            else:
                g = np.broadcast_to(g, node.value.shape).astype(np.float64, copy=True) \
                    if g.shape != node.value.shape else g
            out[nid] = Tensor(g)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between analytic gradient and central differences.

    ``f`` must map one tensor to a scalar tensor on the tensor's own tape.
    The error is max over components of |analytic - fd| / max(1, |fd|).
    """
    if not (0.0 < h <= 1e-2):
        raise ValueError(f"grad_check: h must be in (0, 1e-2], got {h}")
    x = _as_array(x)

    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    if y.value.shape != ():
        raise ValueError("grad_check: f must return a scalar")
    analytic = backward(tape, y)[xt.node_id].value

    def feval(arr: np.ndarray) -> float:
        t = Tape()
        return float(f(t.leaf(arr)).value)

    fd = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fd.flat[i] = (feval(xp) - feval(xm)) / (2.0 * h)

    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(rel.max()) if rel.size else 0.0
