"""Dense float64 matrix primitives with a reverse-mode tape.

Every primitive accepts plain ``numpy`` arrays or :class:`Node` objects.  When
at least one operand is a node the result is recorded on that node's tape and
a node is returned; otherwise the primitive is evaluated eagerly and a plain
array comes back.  The same model code therefore serves inference (arrays
only) and differentiation (parameters wrapped with :meth:`Tape.var`).

All values are 2-D float64 arrays.  Index arguments (rows, targets, ...) are
constants and never receive gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id", "value", "parents", "backward_fn", "name")

    def __init__(self, tape, id_, value, parents, backward_fn, name=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node(id={self.id}{label}, shape={self.value.shape})"


class Gradients(dict):
    """Gradient map keyed by node id; also indexable by the node itself."""

    def __getitem__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__getitem__(key)

    def get(self, key, default=None):
        if isinstance(key, Node):
            key = key.id
        return super().get(key, default)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in evaluation order, so the list is topologically
    sorted by construction and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value, name=None) -> Node:
        """Register a tracked leaf (a tensor we want gradients for)."""
        value = as_matrix(value)
        return self._record(value, (), None, name)

    def _record(self, value, parents, backward_fn, name=None) -> Node:
        if not np.isfinite(value).all():
            raise FloatingPointError(f"non-finite value produced by {name or 'operation'}")
        node = Node(self, len(self.nodes), value, parents, backward_fn, name)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> Gradients:
        """Propagate d(loss)/d(node) to every node that influences ``loss``."""
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss must be a node recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads = Gradients()
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = dict.get(grads, node.id)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                prev = dict.get(grads, parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        return grads


def as_matrix(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {a.ndim}-D")
    return a


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _emit(value, inputs, backward_fn: Callable, name: str):
    tape = _tape_of(*inputs)
    if tape is None:
        if not np.isfinite(value).all():
            raise FloatingPointError(f"non-finite value produced by {name}")
        return value
    parents = tuple(x if isinstance(x, Node) else None for x in inputs)
    return tape._record(value, parents, backward_fn, name)


def matmul(a, b):
    """Matrix product ``a @ b``."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def backward(g):
        ga = g @ bv.T if isinstance(a, Node) else None
        gb = av.T @ g if isinstance(b, Node) else None
        return ga, gb

    return _emit(out, (a, b), backward, "matmul")


def matmul_nt(a, b):
    """``a @ b.T`` without materialising a transpose node."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeError(f"matmul_nt shape mismatch: {av.shape} @ {bv.shape}.T")
    out = av @ bv.T

    def backward(g):
        ga = g @ bv if isinstance(a, Node) else None
        gb = g.T @ av if isinstance(b, Node) else None
        return ga, gb

    return _emit(out, (a, b), backward, "matmul_nt")


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _emit(av + bv, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    """Elementwise product of equally shaped matrices."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale_rows(a, col):
    """Multiply row ``t`` of ``a`` by the scalar ``col[t, 0]``."""
    av, cv = value_of(a), value_of(col)
    if cv.shape != (av.shape[0], 1):
        raise ShapeError(f"scale_rows expects a ({av.shape[0]}, 1) column, got {cv.shape}")

    def backward(g):
        gc = (g * av).sum(axis=1, keepdims=True) if isinstance(col, Node) else None
        return g * cv, gc

    return _emit(av * cv, (a, col), backward, "scale_rows")


def sum_all(a):
    av = value_of(a)
    out = np.array([[av.sum()]])
    return _emit(out, (a,), lambda g: (np.full_like(av, g[0, 0]),), "sum_all")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    """Sigmoid-weighted linear unit ``x * sigmoid(x)``."""
    av = value_of(a)
    sig = _sigmoid(av)

    def backward(g):
        return (g * sig * (1.0 + av * (1.0 - sig)),)

    return _emit(av * sig, (a,), backward, "silu")


def softmax_rows(a):
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    av = value_of(a)
    e = np.exp(av - av.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), backward, "softmax_rows")


def log_softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean over rows of ``-log softmax(logits)[row, target]``; returns a 1x1 matrix."""
    lv = value_of(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = lv.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logits rows but {targets.shape[0]} targets")
    if n == 0:
        raise ValueError("cross_entropy over zero tokens")
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    logp = log_softmax_rows(lv)
    rows = np.arange(n)
    out = np.array([[-logp[rows, targets].mean()]])

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g[0, 0] / n),)

    return _emit(out, (logits,), backward, "cross_entropy")


def take_rows(a, rows, unique=False):
    """Gather rows ``a[rows]``; gradients scatter-add back.

    ``unique=True`` promises that ``rows`` has no repeats, which allows a
    plain assignment instead of an unbuffered scatter-add in backward.
    """
    av = value_of(a)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        if unique:
            full = np.zeros_like(av)
            full[rows] = g
        else:
            onehot = (rows[None, :] == np.arange(av.shape[0])[:, None]).astype(np.float64)
            full = onehot @ g
        return (full,)

    return _emit(av[rows], (a,), backward, "take_rows")


def take_elems(a, rows, cols):
    """Gather ``a[rows[t], cols[t]]`` into an (n, 1) column.

    The ``(row, col)`` pairs must be distinct.
    """
    av = value_of(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(av)
        full[rows, cols] = g[:, 0]
        return (full,)

    return _emit(av[rows, cols][:, None], (a,), backward, "take_elems")


def take_along_rows(a, idx):
    """``out[t, k] = a[t, idx[t, k]]`` for an integer index matrix ``idx``."""
    av = value_of(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx, g, axis=1)
        return (full,)

    return _emit(np.take_along_axis(av, idx, axis=1), (a,), backward, "take_along_rows")


def row_normalize(a):
    """Divide every row by its sum."""
    av = value_of(a)
    total = av.sum(axis=1, keepdims=True)
    out = av / total

    def backward(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / total,)

    return _emit(out, (a,), backward, "row_normalize")


def scatter_add_rows(n_rows: int, width: int, parts: Sequence[tuple[np.ndarray, object]]):
    """Sum ``(rows, block)`` pairs into an ``n_rows x width`` zero matrix.

    Parts are accumulated in the order given, which fixes the summation order.
    """
    out = np.zeros((n_rows, width))
    blocks = []
    for rows, block in parts:
        bv = value_of(block)
        if bv.shape != (len(rows), width):
            raise ShapeError(f"scatter block shape {bv.shape} does not match ({len(rows)}, {width})")
        out[rows] += bv
        blocks.append(block)
    row_sets = [np.asarray(r, dtype=np.int64) for r, _ in parts]

    def backward(g):
        return tuple(g[r] for r in row_sets)

    if _tape_of(*blocks) is None:
        return out
    return _emit(out, tuple(blocks), backward, "scatter_add_rows")


def causal_mean(a, seq_len: int):
    """Running mean over each length-``seq_len`` segment of rows.

    Row ``t`` of a segment becomes the mean of rows ``0..t`` of that segment.
    """
    av = value_of(a)
    n, d = av.shape
    if seq_len <= 0 or n % seq_len:
        raise ShapeError(f"{n} rows cannot be split into segments of {seq_len}")
    counts = np.arange(1, seq_len + 1, dtype=np.float64)[None, :, None]
    out = (np.cumsum(av.reshape(-1, seq_len, d), axis=1) / counts).reshape(n, d)

    def backward(g):
        gs = g.reshape(-1, seq_len, d) / counts
        rev = np.cumsum(gs[:, ::-1, :], axis=1)[:, ::-1, :]
        return (rev.reshape(n, d),)

    return _emit(out, (a,), backward, "causal_mean")
