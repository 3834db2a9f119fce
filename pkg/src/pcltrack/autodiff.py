"""A small reverse-mode tape over numpy arrays.

Only the primitives the association losses need are provided. Every forward
result is checked for non-finite values so a blow-up names the op that caused
it instead of surfacing later as a NaN loss.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp


class NumericalError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "grad")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (), backward_fn: Optional[Callable] = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=float)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _node(op: str, out: np.ndarray, parents, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite value produced by '{op}'")
    return Tensor(out, tuple(parents), backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _node(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", a.data @ b.data, (a, b), back)


def vecmat(q, m) -> Tensor:
    """Batched row-vector times matrix: (R, N) x (R, N, M) -> (R, M)."""
    q, m = as_tensor(q), as_tensor(m)
    out = np.einsum("rn,rnm->rm", q.data, m.data)

    def back(g):
        return np.einsum("rm,rnm->rn", g, m.data), q.data[:, :, None] * g[:, None, :]

    return _node("vecmat", out, (q, m), back)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max(a, floor) with a constant floor; zero gradient below it."""
    a = as_tensor(a)
    above = a.data > floor
    return _node("maximum", np.where(above, a.data, floor), (a,), lambda g: (g * above,))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node("index", a.data[idx], (a,), back)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """``a[rows]`` along axis 0 with a sparse scatter-add backward.

    Much faster than ``np.add.at`` when many rows repeat, which is the
    common case for gathering per-hop matching blocks.
    """
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)

    def back(g):
        flat = g.reshape(len(rows), -1)
        scatter = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(a.shape[0], len(rows)))
        return (np.asarray(scatter @ flat).reshape(a.shape),)

    return _node("take_rows", a.data[rows], (a,), back)


def _scatter_rows(buf: np.ndarray, rows: np.ndarray, vals: np.ndarray) -> None:
    """buf[rows] += vals with repeated rows summed (sorted segment reduction)."""
    order = np.argsort(rows, kind="stable")
    r = rows[order]
    starts = np.flatnonzero(np.r_[True, r[1:] != r[:-1]])
    buf[r[starts]] += np.add.reduceat(vals[order], starts, axis=0)


def propagate_paths(blocks, hop_rows: np.ndarray, active: np.ndarray, q0: np.ndarray, null_col: np.ndarray):
    """Push distributions along per-row chains of matching blocks.

    ``blocks`` has shape (B, N, N); row r uses block ``hop_rows[r, k]`` at hop
    k while ``active[r, k]``. After every hop the distribution is renormalised;
    a row whose mass vanishes is sent to its ``null_col[r, k]``. Returns the
    final (R, N) distributions and the number of such degenerate hops.
    """
    blocks = as_tensor(blocks)
    B = blocks.data
    R, hops = hop_rows.shape
    ar = np.arange(R)
    q = np.asarray(q0, dtype=float).copy()
    saved = []
    degenerate = 0
    for k in range(hops):
        act = active[:, k]
        if not act.any():
            continue
        rows = ar[act]
        M = B[hop_rows[rows, k]]
        nxt = np.einsum("rn,rnm->rm", q[rows], M)
        Z = nxt.sum(axis=1)
        empty = Z <= 0
        degenerate += int(empty.sum())
        new = nxt / np.where(empty, 1.0, Z)[:, None]
        if empty.any():
            new[empty] = 0.0
            new[empty, null_col[rows[empty], k]] = 1.0
        saved.append((k, rows, q[rows].copy(), new, Z, empty))
        q[rows] = new

    def back(g):
        gq = g.copy()
        gB = np.zeros_like(B)
        for k, rows, q_prev, new, Z, empty in reversed(saved):
            gn = gq[rows]
            ok = ~empty
            dn = np.where(ok[:, None], (gn - (gn * new).sum(axis=1, keepdims=True)) / np.where(ok, Z, 1.0)[:, None], 0.0)
            M = B[hop_rows[rows, k]]
            gq[rows] = np.einsum("rm,rnm->rn", dn, M)
            _scatter_rows(gB, hop_rows[rows, k], q_prev[:, :, None] * dn[:, None, :])
        return (gB,)

    out = _node("propagate_paths", q, (blocks,), back)
    return out, degenerate


def concat(parts: Sequence, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node("concat", np.concatenate([p.data for p in parts], axis=axis), parts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(
        "where", np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


def masked_softmax(x, valid: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``valid`` entries (others are exactly 0).

    Computed via the max-shifted log-sum-exp; slices with no valid entry are
    all-zero rather than NaN.
    """
    x = as_tensor(x)
    z = x.data if valid is None else np.where(valid, x.data, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("masked_softmax", out, (x,), back)


def entropy(q, axis=-1) -> Tensor:
    """Shannon entropy in nats with 0 log 0 = 0 (zero entries get zero gradient)."""
    q = as_tensor(q)
    pos = q.data > 0
    logq = np.log(np.where(pos, q.data, 1.0))
    out = -(q.data * logq).sum(axis=axis)

    def back(g):
        return (np.where(pos, -(logq + 1.0), 0.0) * np.expand_dims(g, axis),)

    return _node("entropy", out, (q,), back)


def backward(root: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node on the tape."""
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    root.grad = np.full(root.shape, seed, dtype=float)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or p.op == "const":
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient flowing out of '{node.op}'")
            p.grad = g if p.grad is None else p.grad + g


def grad_of(root: Tensor, leaves: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    backward(root)
    return {k: (v.grad.copy() if v.grad is not None else np.zeros(v.shape)) for k, v in leaves.items()}
