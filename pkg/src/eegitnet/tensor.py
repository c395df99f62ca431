"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array together with the bookkeeping needed
for a single reverse pass: the tensors it was computed from and a closure
that routes the output gradient to them.  Recording happens implicitly
whenever an operation touches a tensor with ``requires_grad`` set, so the
forward pass *is* the tape.  Training code runs in float32; the gradient
check tests build float64 graphs.

The engine is single-threaded by design: one graph is walked at a time and
tensor data is never mutated once recorded (optimizers write only into leaf
parameters between passes).
"""
from __future__ import annotations

import contextlib

import numpy as np

_REAL_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _REAL_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """n-dimensional array of real32/real64 values plus autodiff bookkeeping.

    Attributes
    ----------
    data : numpy.ndarray
        Row-major values.
    grad : numpy.ndarray or None
        Accumulated gradient, same shape as ``data``; allocated lazily.
    requires_grad : bool
        Leaf parameters set this; op outputs inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    # ------------------------------------------------------------------
    # introspection
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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # ------------------------------------------------------------------
    # gradient plumbing
    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A view of the same data with no graph attached."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse pass from a scalar, accumulating into ``.grad`` buffers.

        Each recorded graph may be walked once; a second call on the same
        output is rejected.  Intermediate nodes release their graph
        references as they are consumed.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar (got shape %r)" % (self.shape,))
        if self._backward_done:
            raise RuntimeError("backward already called on this tape")

        # Iterative topological sort; graphs here are deep (dozens of layers
        # per training step) so recursion is avoided.
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)
            if fn is not None:
                # free graph memory; leaves keep their (empty) bookkeeping
                node._parents = ()
                node._backward_fn = None
        self._backward_done = True

    # ------------------------------------------------------------------
    # operators
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not recorded; multiply by a reciprocal")
        return mul(self, _lift(1.0 / other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self.dtype))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def from_op(data, parents, backward_fn):
    """Wrap an op result, recording the graph edge when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def accumulate(tensor, grad):
    """Add ``grad`` into ``tensor.grad`` (no-op for constants)."""
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    np.add(tensor.grad, grad, out=tensor.grad, casting="same_kind")


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after a broadcast forward op."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise and shape primitives

def add(a, b):
    out = a.data + b.data

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return from_op(out, (a, b), backward)


def mul(a, b):
    out = a.data * b.data

    def backward(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return from_op(out, (a, b), backward)


def neg(a):
    def backward(g):
        accumulate(a, -g)

    return from_op(-a.data, (a,), backward)


def square(a):
    out = a.data * a.data

    def backward(g):
        accumulate(a, g * (2.0 * a.data))

    return from_op(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        accumulate(a, g * out)

    return from_op(out, (a,), backward)


def log(a):
    out = np.log(a.data)

    def backward(g):
        accumulate(a, g / a.data)

    return from_op(out, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(a, np.broadcast_to(gg, a.shape))

    return from_op(out, (a,), backward)


def tensor_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims),
               Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        accumulate(a, g.reshape(a.shape))

    return from_op(out, (a,), backward)


def flip_time(a):
    """Reverse the trailing (time) axis; used to express lag-ordered kernels."""
    out = np.ascontiguousarray(a.data[..., ::-1])

    def backward(g):
        accumulate(a, g[..., ::-1])

    return from_op(out, (a,), backward)


def concat_channels(tensors):
    """Concatenate along axis 1 (the filter/channel axis)."""
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.shape[1] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            accumulate(t, g[:, start:start + size])
            start += size

    return from_op(out, tuple(tensors), backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data

    def backward(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return from_op(out, (a, b), backward)
