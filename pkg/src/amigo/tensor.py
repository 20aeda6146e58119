"""A small reverse-mode differentiation engine on top of numpy.

Every model computation runs on a :class:`Tape`. Operations append a node
holding the forward value and a closure that maps the output gradient to
input gradients. The tape also keeps a floating-point operation counter,
using the following convention:

* a multiply-add counts as 2 flops (``matmul`` records ``2*m*k*n``);
* ``exp``, ``sigmoid`` and ``tanh`` count 4 flops per element;
* every other pointwise op counts 1 flop per element;
* ``neighbor_mean`` counts ``2*nnz*d`` where ``nnz`` is the number of
  directed adjacency entries.

Only forward work is counted. A tape can be differentiated once; calling
:meth:`Tape.backward` a second time raises :class:`TapeError`.

All values are stored as 2-D float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateInputError, DimensionError, DomainError, NumericalError, TapeError

__all__ = [
    "Tape",
    "Tensor",
    "AdamState",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "elementwise",
    "softmax_rows",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "transpose",
    "row_mean",
    "row_max",
    "gather_rows",
    "total_sum",
    "instance_norm",
    "segment_sum",
    "segment_mean",
    "segment_max",
    "neighbor_mean",
    "mean_operator",
    "MeanOperator",
]

INSTANCE_NORM_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A 2-D array bound to a tape node."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape._needs_grad[self.node_id]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Append-only record of a forward computation.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph.
    """

    def __init__(self):
        self._kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._backward: list[BackwardFn | None] = []
        self._needs_grad: list[bool] = []
        self.flop_count = 0
        self._consumed = False

    def __len__(self) -> int:
        return len(self._kinds)

    @property
    def nodes(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(zip(self._kinds, self._inputs))

    def _check_open(self):
        if self._consumed:
            raise TapeError("tape already consumed by backward(); start a new tape")

    def _append(self, kind, inputs, backward, needs_grad) -> int:
        self._kinds.append(kind)
        self._inputs.append(inputs)
        self._backward.append(backward)
        self._needs_grad.append(needs_grad)
        return len(self._kinds) - 1

    def variable(self, value) -> Tensor:
        """Register a differentiable leaf (a parameter or an input under test)."""
        self._check_open()
        arr = _as_2d(value)
        return Tensor(arr, self, self._append("leaf", (), None, True))

    def constant(self, value) -> Tensor:
        self._check_open()
        arr = _as_2d(value)
        return Tensor(arr, self, self._append("const", (), None, False))

    def record(
        self,
        kind: str,
        inputs: Sequence[Tensor],
        value: np.ndarray,
        backward: BackwardFn,
        flops: int = 0,
    ) -> Tensor:
        """Append an operation node.

        ``backward`` receives the gradient of the output and returns one
        gradient (or None) per input, in order.
        """
        self._check_open()
        for t in inputs:
            if t.tape is not self:
                raise TapeError(f"{kind}: input tensor belongs to a different tape")
        needs = any(self._needs_grad[t.node_id] for t in inputs)
        ids = tuple(t.node_id for t in inputs)
        node = self._append(kind, ids, backward if needs else None, needs)
        self.flop_count += int(flops)
        return Tensor(value, self, node)

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | Sequence[Tensor] | None = None):
        """Reverse-accumulate gradients of a scalar ``loss``.

        ``wrt`` selects which leaves to report. A mapping yields a dict
        with the same keys, a sequence yields a list. Leaves that do not
        influence the loss get zero gradients. The tape cannot be reused.
        """
        self._check_open()
        if loss.tape is not self:
            raise TapeError("loss tensor belongs to a different tape")
        if loss.value.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._kinds)
        grads[loss.node_id] = np.ones_like(loss.value)
        for node in range(loss.node_id, -1, -1):
            g = grads[node]
            fn = self._backward[node]
            if g is None or fn is None:
                continue
            in_grads = fn(g)
            for src, ig in zip(self._inputs[node], in_grads):
                if ig is None or not self._needs_grad[src]:
                    continue
                if grads[src] is None:
                    grads[src] = ig
                else:
                    grads[src] = grads[src] + ig
        self._consumed = True
        # drop closures so saved activations can be freed
        self._backward = [None] * len(self._backward)

        def pick(t: Tensor) -> np.ndarray:
            g = grads[t.node_id]
            return np.zeros_like(t.value) if g is None else g

        if wrt is None:
            return None
        if isinstance(wrt, Mapping):
            return {k: pick(t) for k, t in wrt.items()}
        return [pick(t) for t in wrt]


def _as_2d(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got an array with shape {arr.shape}")
    return arr


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TapeError("at least one operand must be a Tensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(kind: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{kind} produced non-finite values")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    (m, k), (k2, n) = a.shape, b.shape
    if k != k2:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return tape.record("matmul", (a, b), av @ bv, backward, flops=2 * m * k * n)


def transpose(a: Tensor) -> Tensor:
    return a.tape.record("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# pointwise


def _binary_shapes(kind, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out_shape = _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    value = a.value + b.value
    return tape.record("add", (a, b), value, backward, flops=int(np.prod(out_shape)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out_shape = _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    value = a.value - b.value
    return tape.record("sub", (a, b), value, backward, flops=int(np.prod(out_shape)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    out_shape = _binary_shapes("mul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape.record("mul", (a, b), av * bv, backward, flops=int(np.prod(out_shape)))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return a.tape.record("sigmoid", (a,), out, backward, flops=4 * x.size)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return a.tape.record("tanh", (a,), out, backward, flops=4 * out.size)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    out = np.where(mask, a.value, 0.0)

    def backward(g):
        return (g * mask,)

    return a.tape.record("relu", (a,), out, backward, flops=out.size)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    _check_finite("exp", out)

    def backward(g):
        return (g * out,)

    return a.tape.record("exp", (a,), out, backward, flops=4 * out.size)


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min():g})")

    def backward(g):
        return (g / x,)

    return a.tape.record("log", (a,), np.log(x), backward, flops=x.size)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (``add``, ``sub``, ``mul``, ``sigmoid``,
    ``tanh``, ``relu``, ``exp``, ``log``)."""
    if op in _UNARY:
        (a,) = args
        return _UNARY[op](a)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    Entries where the boolean ``mask`` is false get probability 0; every row
    must keep at least one entry.
    """
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask {mask.shape} vs input {x.shape}")
        if not mask.any(axis=1).all():
            raise DegenerateInputError("softmax row with every entry masked")
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return a.tape.record("softmax_rows", (a,), out, backward, flops=6 * x.size)


# ---------------------------------------------------------------------------
# structural


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DegenerateInputError("concat_cols of an empty list")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    value = np.concatenate([p.value for p in parts], axis=1)
    return parts[0].tape.record("concat_cols", parts, value, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DegenerateInputError("concat_rows of an empty list")
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    value = np.concatenate([p.value for p in parts], axis=0)
    return parts[0].tape.record("concat_rows", parts, value, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record("slice_cols", (a,), a.value[:, start:stop].copy(), backward)


def _row_index(a: Tensor, rows) -> np.ndarray:
    if rows is None:
        idx = np.arange(a.shape[0])
    else:
        idx = np.asarray(rows, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise DegenerateInputError("row reduction over an empty row set")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise DimensionError(f"row index out of range for shape {a.shape}")
    return idx


def row_mean(a: Tensor, rows=None) -> Tensor:
    """Column-wise mean over ``rows`` (all rows by default), shape 1 x d."""
    idx = _row_index(a, rows)
    shape, n = a.shape, idx.size

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g / n)
        return (full,)

    value = a.value[idx].mean(axis=0, keepdims=True)
    return a.tape.record("row_mean", (a,), value, backward, flops=n * shape[1])


def row_max(a: Tensor, rows=None) -> Tensor:
    """Column-wise max over ``rows``; the gradient goes to the first argmax."""
    idx = _row_index(a, rows)
    shape = a.shape
    sub_ = a.value[idx]
    arg = idx[np.argmax(sub_, axis=0)]
    cols = np.arange(shape[1])

    def backward(g):
        full = np.zeros(shape)
        full[arg, cols] = g[0]
        return (full,)

    value = sub_.max(axis=0, keepdims=True)
    return a.tape.record("row_max", (a,), value, backward, flops=idx.size * shape[1])


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for shape {a.shape}")
    shape = a.shape
    unique = np.unique(idx).size == idx.size

    def backward(g):
        full = np.zeros(shape)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return a.tape.record("gather_rows", (a,), a.value[idx], backward)


def total_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0]),)

    return a.tape.record("sum", (a,), a.value.sum().reshape(1, 1), backward, flops=a.value.size)


def instance_norm(v: Tensor) -> Tensor:
    """``(v - mean) / sqrt(var + 1e-5)`` over the columns of each row.

    Population variance, no learnable affine. A batch of rows is normalised
    row by row.
    """
    n, d = v.shape
    if d < 2:
        raise DegenerateInputError("instance_norm needs at least 2 features")
    x = v.value
    centred = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=1, keepdims=True) + INSTANCE_NORM_EPS)
    out = centred * inv_std

    def backward(g):
        return (
            inv_std
            * (g - g.mean(axis=1, keepdims=True) - out * (g * out).mean(axis=1, keepdims=True)),
        )

    return v.tape.record("instance_norm", (v,), out, backward, flops=5 * x.size)


# ---------------------------------------------------------------------------
# segment reductions over contiguous row groups


def segment_starts(segments: np.ndarray, n_segments: int) -> np.ndarray:
    """First row of each segment; ``segments`` must be sorted and cover
    every id in ``range(n_segments)``."""
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    if seg.size and np.any(np.diff(seg) < 0):
        raise DimensionError("segment ids must be sorted (contiguous row groups)")
    counts = np.bincount(seg, minlength=n_segments)
    if counts.size != n_segments or np.any(counts == 0):
        raise DegenerateInputError("every segment needs at least one row")
    return np.concatenate([[0], np.cumsum(counts)[:-1]])


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    starts = segment_starts(seg, n_segments)

    def backward(g):
        return (g[seg],)

    value = np.add.reduceat(a.value, starts, axis=0)
    return a.tape.record("segment_sum", (a,), value, backward, flops=a.value.size)


def segment_mean(a: Tensor, segments, n_segments: int) -> Tensor:
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    starts = segment_starts(seg, n_segments)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)[:, None]

    def backward(g):
        return ((g / counts)[seg],)

    value = np.add.reduceat(a.value, starts, axis=0) / counts
    return a.tape.record("segment_mean", (a,), value, backward, flops=a.value.size)


def segment_max(a: Tensor, segments, n_segments: int) -> Tensor:
    """Per-segment column max; the gradient goes to the first maximal row."""
    seg = np.asarray(segments, dtype=np.int64).reshape(-1)
    starts = segment_starts(seg, n_segments)
    x = a.value
    value = np.maximum.reduceat(x, starts, axis=0)
    rows = np.arange(x.shape[0])[:, None]
    first = np.minimum.reduceat(np.where(x == value[seg], rows, x.shape[0]), starts, axis=0)
    cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[first, cols] = g
        return (full,)

    return a.tape.record("segment_max", (a,), value, backward, flops=x.size)


# ---------------------------------------------------------------------------
# graphs


class MeanOperator:
    """Neighbour averaging ``D^-1 A`` over a symmetric adjacency.

    Stored as neighbour lists sorted by source row, so applying it is a
    gather plus a segmented sum. Because ``A`` is symmetric the transpose
    is ``A D^-1``: scale by inverse degree, then sum over neighbours.
    Isolated rows stay zero. Built once per (pooled) graph and shared by
    every ``neighbor_mean`` on that structure.
    """

    __slots__ = ("n", "cols", "starts", "nonempty", "inv_deg")

    def __init__(self, n: int, rows: np.ndarray, cols: np.ndarray):
        order = np.argsort(rows, kind="stable")
        rows, self.cols = rows[order], cols[order]
        deg = np.bincount(rows, minlength=n)
        self.n = n
        self.nonempty = np.flatnonzero(deg)
        self.starts = np.concatenate([[0], np.cumsum(deg)[:-1]])[self.nonempty] if n else deg
        self.inv_deg = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)[:, None]

    @property
    def nnz(self) -> int:
        return self.cols.size

    def _neighbor_sum(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n, x.shape[1]))
        if self.cols.size:
            out[self.nonempty] = np.add.reduceat(x[self.cols], self.starts, axis=0)
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._neighbor_sum(x) * self.inv_deg

    def apply_transpose(self, g: np.ndarray) -> np.ndarray:
        return self._neighbor_sum(g * self.inv_deg)

    @classmethod
    def from_edges(cls, edges: np.ndarray, n: int) -> "MeanOperator":
        """``edges`` is an undirected ``E x 2`` list without duplicates."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        return cls(n, np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))

    @classmethod
    def from_adjacency(cls, adjacency: sp.spmatrix) -> "MeanOperator":
        adj = sp.coo_matrix(adjacency)
        if (adj != adj.T).nnz:
            raise DimensionError("neighbor_mean needs a symmetric adjacency")
        keep = adj.data != 0
        return cls(adj.shape[0], adj.row[keep].astype(np.int64), adj.col[keep].astype(np.int64))


def mean_operator(adjacency, n: int | None = None) -> MeanOperator:
    """Coerce a scipy adjacency, an ``E x 2`` edge list or a MeanOperator."""
    if isinstance(adjacency, MeanOperator):
        return adjacency
    if sp.issparse(adjacency):
        return MeanOperator.from_adjacency(adjacency)
    if n is None:
        raise DimensionError("an edge-list adjacency needs the node count")
    return MeanOperator.from_edges(adjacency, n)


def neighbor_mean(features: Tensor, adjacency) -> Tensor:
    """Row k becomes the mean of the feature rows of k's neighbours.

    ``adjacency`` may be a scipy sparse matrix, an undirected ``E x 2`` edge
    list or a prebuilt :class:`MeanOperator`. Isolated nodes get a zero row.
    """
    c, d = features.shape
    op = mean_operator(adjacency, c)
    if op.n != c:
        raise DimensionError(f"neighbor_mean: adjacency over {op.n} nodes vs features {features.shape}")

    def backward(g):
        return (op.apply_transpose(g),)

    value = op.apply(features.value)
    return features.tape.record("neighbor_mean", (features,), value, backward, flops=2 * op.nnz * d)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    weight_decay: float,
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One Adam update with decoupled weight decay, applied in place.

    The decay ``p -= lr * wd * p`` happens before the moment update.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: {name} has shape {p.shape}, gradient {g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
