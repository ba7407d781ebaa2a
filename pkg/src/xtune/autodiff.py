"""Minimal reverse-mode autodiff over dense float64 numpy buffers.

Small by design: the op set is exactly what the encoder, the task losses and
the KL regularizers need, plus a stop-gradient barrier.  No broadcasting
beyond scalar*tensor; every other shape mismatch is an error so that the
finite-difference oracle has a small, fully checkable surface.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(ValueError):
    """Non-finite values where a finite-domain operation was requested."""


class Tensor:
    """A node in the computation graph.

    Holds a float64 value buffer, an (initially empty) gradient buffer, a
    record of the producing op and its parents, and a stop-gradient flag.
    A node with ``stop_gradient`` set forwards its value unchanged but
    propagates zero gradient to its parents.
    """

    __slots__ = ("data", "grad", "op", "parents", "stop_gradient", "_backward")

    def __init__(self, data, op="leaf", parents=(), stop_gradient=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = parents
        self.stop_gradient = stop_gradient
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # light sugar; module-level functions are the canonical API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def constant(values):
    """A leaf node that is not a trainable parameter (no grad is read back)."""
    return Tensor(values, op="constant")


def _node(data, op, parents, backward_fn):
    out = Tensor(data, op=op, parents=parents)
    out._backward = backward_fn
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    _check_same_shape("add", a, b)
    def backward(g):
        return g, g
    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    _check_same_shape("sub", a, b)
    def backward(g):
        return g, -g
    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    _check_same_shape("mul", a, b)
    def backward(g):
        return g * b.data, g * a.data
    return _node(a.data * b.data, "mul", (a, b), backward)


def scale(a, c):
    """Multiply by a plain python scalar (the only broadcast we allow)."""
    c = float(c)
    def backward(g):
        return (g * c,)
    return _node(a.data * c, "scale", (a,), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ: {a.data.shape} @ {b.data.shape}")
    def backward(g):
        return g @ b.data.T, a.data.T @ g
    return _node(a.data @ b.data, "matmul", (a, b), backward)


def add_rowvec(m, v):
    """Add a length-c vector to every row of an (r, c) matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {m.data.shape} and {v.data.shape} do not conform")
    def backward(g):
        return g, g.sum(axis=0)
    return _node(m.data + v.data, "add_rowvec", (m, v), backward)


def embedding_lookup(table, ids):
    """Gather rows of a 2-d table; grads scatter-add back (repeats allowed)."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.data.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-d, got shape {ids.shape}")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise IndexError(f"embedding_lookup: id {bad} out of range for table with {n_rows} rows")
    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)
    return _node(table.data[ids], "embedding_lookup", (table,), backward)


def gather(v, indices):
    """Select entries of a 1-d vector; grads scatter-add back."""
    if v.data.ndim != 1:
        raise ShapeError(f"gather: vector must be 1-d, got {v.data.shape}")
    indices = np.asarray(indices, dtype=np.intp)
    n = v.data.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        bad = indices[(indices < 0) | (indices >= n)][0]
        raise IndexError(f"gather: index {bad} out of range for vector of length {n}")
    def backward(g):
        gv = np.zeros_like(v.data)
        np.add.at(gv, indices, g)
        return (gv,)
    return _node(v.data[indices], "gather", (v,), backward)


def mean_rows(m):
    """Column means of an (r, c) matrix, returned as a length-c vector."""
    if m.data.ndim != 2:
        raise ShapeError(f"mean_rows: needs a 2-d operand, got {m.data.shape}")
    r = m.data.shape[0]
    def backward(g):
        return (np.tile(g / r, (r, 1)),)
    return _node(m.data.mean(axis=0), "mean_rows", (m,), backward)


def tanh(a):
    out_data = np.tanh(a.data)
    def backward(g):
        return (g * (1.0 - out_data * out_data),)
    return _node(out_data, "tanh", (a,), backward)


def log(a):
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive input")
    def backward(g):
        return (g / a.data,)
    return _node(np.log(a.data), "log", (a,), backward)


def exp(a):
    out_data = np.exp(a.data)
    def backward(g):
        return (g * out_data,)
    return _node(out_data, "exp", (a,), backward)


def sum(a):  # noqa: A001 - deliberate, mirrors numpy.sum naming
    """Sum of all entries, as a scalar node."""
    def backward(g):
        return (np.full_like(a.data, float(g)),)
    return _node(a.data.sum(), "sum", (a,), backward)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    def backward(g):
        return (g.reshape(old),)
    return _node(a.data.reshape(shape), "reshape", (a,), backward)


def clip_min(a, floor):
    """Elementwise max(a, floor); subgradient passes only where a > floor."""
    floor = float(floor)
    mask = a.data > floor
    def backward(g):
        return (g * mask,)
    return _node(np.maximum(a.data, floor), "clip_min", (a,), backward)


def log_softmax(a, axis=0):
    """Numerically stabilized log-softmax along one axis."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax: input contains NaN or Inf")
    if axis not in range(a.data.ndim):
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)
    return _node(out_data, "log_softmax", (a,), backward)


def detach(a):
    """Identity on values, gradient barrier on the way back.

    Snapshots the value buffer (bitwise-exact copy), so a detached branch is
    frozen against later in-place edits of its source; backward never
    crosses this node into its parents.
    """
    out = Tensor.__new__(Tensor)
    out.data = a.data.copy()
    out.grad = None
    out.op = "detach"
    out.parents = (a,)
    out.stop_gradient = True
    out._backward = None
    return out


def _toposort(root):
    """Reverse-topological order; does not descend past stop-gradient nodes."""
    order = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        if id(node) in state:
            continue
        state[id(node)] = 0
        stack.append((node, True))
        if not node.stop_gradient:
            for p in node.parents:
                if id(p) not in state:
                    stack.append((p, False))
    return order


def backward(root):
    """Populate .grad on every node reachable from a scalar root."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    root._accumulate(np.ones_like(root.data))
    for node in reversed(_toposort(root)):
        if node.stop_gradient or node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            parent._accumulate(g)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def grad_check(loss_fn, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic in the current values of ``params``
    (a list of leaf tensors).  Relative error for each entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# Registered primitives, keyed by name; used by the gradient property tests
# to make sure nothing escapes finite-difference coverage.
PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "add_rowvec": add_rowvec,
    "embedding_lookup": embedding_lookup,
    "gather": gather,
    "mean_rows": mean_rows,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "sum": sum,
    "reshape": reshape,
    "clip_min": clip_min,
    "log_softmax": log_softmax,
}
