"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation records a node with a vector-Jacobian closure; ``backward``
replays the nodes in reverse creation order, which is a valid topological
order because operands always exist before their results. Graphs are
implicit in the tensors themselves, so independent graphs share no state.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_NODE_COUNTER = itertools.count()


class Tensor:
    """A float64 array plus its position in the recorded computation graph.

    Leaf tensors (no parents) are the differentiation variables; everything
    else carries a closure mapping the output gradient to per-parent
    gradient contributions.
    """

    __slots__ = ("data", "_parents", "_vjp", "_id")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self._id = next(_NODE_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, leaf={self.is_leaf})"

    # Small conveniences; heavy lifting stays in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data) -> Tensor:
    """Wrap array-like data as a leaf tensor."""
    return Tensor(data)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def vjp(g):
        return g, g

    return Tensor(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return Tensor(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)

    def vjp(g):
        return g * b.data, g * a.data

    return Tensor(a.data * b.data, (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not differentiated through)."""

    def vjp(g):
        return (g * factor,)

    return Tensor(x.data * factor, (x,), vjp)


def scalar_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor; differentiable in both."""
    if s.shape != ():
        raise DimensionError(f"scalar_mul: scalar operand has shape {s.shape}, expected ()")

    def vjp(g):
        return g * s.data, np.sum(g * x.data)

    return Tensor(x.data * s.data, (x, s), vjp)


def mul_const(x: Tensor, factors) -> Tensor:
    """Elementwise multiply by a constant array broadcastable to x's shape."""
    factors = np.asarray(factors, dtype=np.float64)
    try:
        out = x.data * factors
    except ValueError as exc:
        raise DimensionError(f"mul_const: factors {factors.shape} do not broadcast to {x.shape}") from exc
    if out.shape != x.shape:
        raise DimensionError(f"mul_const: factors {factors.shape} change shape {x.shape} to {out.shape}")

    def vjp(g):
        return (g * factors,)

    return Tensor(out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), vjp)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a row vector (shape (n,) or (1, n)) to every row of a 2-d tensor."""
    if x.ndim != 2:
        raise DimensionError(f"add_row: expected 2-d tensor, got {x.shape}")
    if row.data.reshape(-1).shape[0] != x.shape[1] or row.ndim > 2:
        raise DimensionError(f"add_row: row {row.shape} does not match width of {x.shape}")

    def vjp(g):
        return g, g.sum(axis=0).reshape(row.shape)

    return Tensor(x.data + row.data.reshape(1, -1), (x, row), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        t = out * out
        np.subtract(1.0, t, out=t)
        t *= g
        return (t,)

    return Tensor(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * np.ones(x.shape),)

    return Tensor(x.data.sum(), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def vjp(g):
        return (g * np.full(x.shape, 1.0 / n),)

    return Tensor(x.data.mean(), (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")

    def vjp(g):
        return (g.reshape(x.shape),)

    return Tensor(x.data.reshape(shape), (x,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading (passage) axis."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    trailing = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != trailing:
            raise DimensionError(f"concat_rows: trailing dims {p.shape} vs {parts[0].shape}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise IndexError(f"slice_rows: [{start}, {stop}) out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return (full,)

    return Tensor(x.data[start:stop].copy(), (x,), vjp)


def take_rows(x: Tensor, indices, unique: bool = False) -> Tensor:
    """Gather leading-axis slices; duplicate indices accumulate gradients.

    ``unique=True`` promises the caller's indices are distinct, enabling a
    much faster scatter on the backward pass.
    """
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise DimensionError(f"take_rows: indices must be 1-d, got shape {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for leading extent {x.shape[0]}")

    def vjp(g):
        full = np.zeros(x.shape)
        if unique:
            full[indices] = g
        else:
            np.add.at(full, indices, g)
        return (full,)

    return Tensor(x.data[indices], (x,), vjp)


def zero_slices(x: Tensor, positions: Iterable[int]) -> Tensor:
    """Zero the given leading-axis slices, leaving the rest untouched."""
    pos = sorted(set(int(p) for p in positions))
    if pos and (pos[0] < 0 or pos[-1] >= x.shape[0]):
        raise IndexError(f"zero_slices: position out of range for leading extent {x.shape[0]}")
    factors = np.ones((x.shape[0],) + (1,) * (x.ndim - 1))
    factors[pos] = 0.0
    return mul_const(x, factors)


def block_mean(x: Tensor, block: int) -> Tensor:
    """Mean over consecutive row blocks of a 2-d tensor: (m*k, d) -> (m, d)."""
    if x.ndim != 2 or block <= 0 or x.shape[0] % block:
        raise DimensionError(f"block_mean: {x.shape} is not divisible into rows of {block}")
    m = x.shape[0] // block
    out = x.data.reshape(m, block, x.shape[1]).mean(axis=1)

    def vjp(g):
        return (np.repeat(g, block, axis=0) / block,)

    return Tensor(out, (x,), vjp)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times: (m, d) -> (m*k, d)."""
    if x.ndim != 2 or k <= 0:
        raise DimensionError(f"repeat_rows: bad operand {x.shape} or count {k}")

    def vjp(g):
        return (g.reshape(x.shape[0], k, x.shape[1]).sum(axis=1),)

    return Tensor(np.repeat(x.data, k, axis=0), (x,), vjp)


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Extract a single entry of a 2-d tensor as a scalar."""
    if x.ndim != 2:
        raise DimensionError(f"pick: expected 2-d tensor, got {x.shape}")
    if not (0 <= i < x.shape[0] and 0 <= j < x.shape[1]):
        raise IndexError(f"pick: ({i}, {j}) out of range for {x.shape}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[i, j] = g
        return (full,)

    return Tensor(x.data[i, j], (x,), vjp)


def attend(weights: Tensor, values: Tensor) -> Tensor:
    """Per-example weighted sum: (B, K) weights over (B*K, d) values -> (B, d)."""
    if weights.ndim != 2 or values.ndim != 2:
        raise DimensionError(f"attend: expected 2-d operands, got {weights.shape} and {values.shape}")
    b, k = weights.shape
    if values.shape[0] != b * k:
        raise DimensionError(f"attend: values {values.shape} do not tile weights {weights.shape}")
    d = values.shape[1]
    v3 = values.data.reshape(b, k, d)
    out = np.einsum("bk,bkd->bd", weights.data, v3)

    def vjp(g):
        gw = np.einsum("bd,bkd->bk", g, v3)
        gv = (weights.data[:, :, None] * g[:, None, :]).reshape(b * k, d)
        return gw, gv

    return Tensor(out, (weights, values), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Stabilized softmax over the last axis."""
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: empty last axis in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (x,), vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Stabilized log-softmax over the last axis."""
    if x.ndim < 1 or x.shape[-1] == 0:
        raise DimensionError(f"log_softmax_rows: empty last axis in shape {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (x,), vjp)


def _check_log_distribution(op: str, rows: np.ndarray) -> None:
    m = rows.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True))
    if np.abs(lse).max() > 1e-9:
        raise ContractError(f"{op}: input is not a normalized log-distribution (|logsumexp| = {np.abs(lse).max():.3g})")


def nll_loss(log_probs: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of one label under a log-distribution row."""
    row = log_probs.data.reshape(-1)
    if log_probs.ndim > 2 or (log_probs.ndim == 2 and log_probs.shape[0] != 1):
        raise DimensionError(f"nll_loss: expected a single row, got {log_probs.shape}")
    if not (0 <= label < row.shape[0]):
        raise IndexError(f"nll_loss: label {label} out of range for {row.shape[0]} classes")
    _check_log_distribution("nll_loss", row[None, :])

    def vjp(g):
        full = np.zeros(log_probs.shape)
        full.reshape(-1)[label] = -g
        return (full,)

    return Tensor(-row[label], (log_probs,), vjp)


def nll_mean(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over a batch of log-distribution rows."""
    labels = np.asarray(labels, dtype=np.intp)
    if log_probs.ndim != 2:
        raise DimensionError(f"nll_mean: expected 2-d log-probs, got {log_probs.shape}")
    b, c = log_probs.shape
    if labels.shape != (b,):
        raise DimensionError(f"nll_mean: labels {labels.shape} do not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"nll_mean: label out of range for {c} classes")
    _check_log_distribution("nll_mean", log_probs.data)
    picked = log_probs.data[np.arange(b), labels]

    def vjp(g):
        full = np.zeros((b, c))
        full[np.arange(b), labels] = -g / b
        return (full,)

    return Tensor(-picked.mean(), (log_probs,), vjp)


def backward(loss: Tensor) -> dict:
    """Gradients of a scalar loss w.r.t. every tensor in its graph.

    Returns a mapping from tensor to a float64 gradient array of the same
    shape. Deterministic: nodes are processed in reverse creation order.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id, reverse=True)

    grads: dict[Tensor, np.ndarray] = {loss: np.ones(())}
    for node in nodes:
        g = grads.get(node)
        if g is None or node._vjp is None:
            continue
        contribs = node._vjp(g)
        for parent, contrib in zip(node._parents, contribs):
            prev = grads.get(parent)
            grads[parent] = contrib if prev is None else prev + contrib
    return grads


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ContractError(f"finite_difference_grad: step must be positive, got {step}")
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data)
        flat[i] = orig - step
        lo = float(f(x).data)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-coordinate relative error with a small absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + floor)).max())
