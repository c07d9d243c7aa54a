"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and, when ``requires_grad`` is set on it
or on any ancestor, records the operation that produced it.  ``backward()``
walks the tape once in reverse topological order and accumulates gradients
into ``.grad``.  Only the operations the tracking pipeline needs are
implemented; there is deliberately no general broadcasting graph surgery,
in-place mutation tracking, or higher-order differentiation.

Gradients always have the same shape and dtype as their tensor's values.
Wrap inference code in :class:`no_grad` to skip tape construction entirely.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _coerce(data):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # -- introspection ------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- backward engine ----------------------------------------------------
    def backward(self, seed=None):
        """Accumulate gradients of ``self`` into every reachable leaf.

        ``seed`` defaults to ones (use a scalar loss).  The tape is released
        afterwards, so a graph can be backpropagated only once.
        """
        if not self.requires_grad:
            raise InvalidArgumentError("backward() on a tensor without grad tracking")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=self.data.dtype),
                                   self.data.shape).copy()

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
            node._parents = ()
            node._bwd = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, expo):
        return power(self, expo)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method aliases used throughout the pipeline
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, bwd) -> Tensor:
    """Build a tape node; other modules use this to define custom ops."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._bwd = bwd if track else None
    return out


def _accum(t: Tensor, g: np.ndarray):
    # Gradient arrays are never mutated in place anywhere in the package, so
    # the first accumulation may alias the incoming buffer.
    if t.requires_grad:
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return make_op(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_op(a.data / b.data, (a, b), bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return make_op(-a.data, (a,), bwd)


def power(a, expo: float):
    a = as_tensor(a)
    e = float(expo)

    def bwd(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return make_op(a.data ** e, (a,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return make_op(out_data, (a,), bwd)


def log(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return make_op(np.log(a.data), (a,), bwd)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out_data))

    return make_op(out_data, (a,), bwd)


def absolute(a):
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return make_op(np.abs(a.data), (a,), bwd)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return make_op(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a):
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return make_op(out_data, (a,), bwd)


def clip(a, lo: float, hi: float):
    """Clamp values; gradient passes only through unclamped entries."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * mask)

    return make_op(np.clip(a.data, lo, hi), (a,), bwd)


def softmax(a, axis: int = -1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return make_op(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return make_op(np.asarray(out_data), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def tmax(a, axis=None, keepdims=False):
    """Max reduction; the subgradient flows to the first argmax entry."""
    a = as_tensor(a)
    if axis is None:
        flat_idx = int(np.argmax(a.data))
        out_data = a.data.reshape(-1)[flat_idx]

        def bwd_flat(g):
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[flat_idx] = g
            _accum(a, ga)

        return make_op(np.asarray(out_data), (a,), bwd_flat)

    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis)
        _accum(a, ga)

    return make_op(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return make_op(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv) if inv is not None else g.transpose())

    return make_op(a.data.transpose(axes) if axes is not None else a.data.transpose(),
                   (a,), bwd)


def getitem(a, key):
    a = as_tensor(a)

    if isinstance(key, np.ndarray) and key.dtype.kind in "iu" and a.ndim == 2:
        # row gather: scatter-add the gradient back through the kernel layer
        # (orders duplicates identically to np.add.at)
        def bwd_rows(g):
            from . import kernels

            sums, _ = kernels.scatter_add(
                np.ascontiguousarray(g.reshape(-1, a.shape[1])),
                key.reshape(-1), a.shape[0])
            _accum(a, sums)

        return make_op(a.data[key], (a,), bwd_rows)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        _accum(a, ga)

    return make_op(a.data[key], (a,), bwd)


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return make_op(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), bwd)


def scatter_mean(values, cells: np.ndarray, num_cells: int):
    """Average rows of ``values`` that share a cell id; empty cells are zero.

    Returns ``(means, counts)`` with ``means`` a ``(num_cells, c)`` tensor.
    The gradient of each input row is its cell's gradient divided by the
    cell population.
    """
    from . import kernels

    values = as_tensor(values)
    if values.ndim != 2:
        raise InvalidArgumentError("scatter_mean expects a 2-D value matrix")
    sums, counts = kernels.scatter_add(values.data, cells, num_cells)
    denom = np.maximum(counts, 1).astype(values.dtype)
    means = sums / denom[:, None]

    def bwd(g):
        _accum(values, (g / denom[:, None])[cells])

    return make_op(means, (values,), bwd), counts
