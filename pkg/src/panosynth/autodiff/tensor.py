"""Dense-tensor reverse-mode differentiation on numpy arrays.

A Tensor wraps a float32/float64 ndarray plus an optional backward closure;
the tape is the implicit DAG of parent links, rebuilt on every step.  Calling
:func:`backward` on a scalar loss accumulates (sums) gradients into every
reachable tensor with ``requires_grad``.  Graphs are single-threaded; distinct
graphs may run concurrently.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Coerce one raw operand to the other's dtype (scalars never upcast)."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _node(data, parents, backward):
    """Build an op output; drops the closure when no parent needs gradients."""
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Accumulate d(loss)/d(tensor) into .grad over the whole reachable graph.

    `loss` must be scalar.  Gradients sum across multiple uses of a tensor;
    tensors not reachable from `loss` are left untouched (treat missing .grad
    as zero).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(loss, params):
    """Run backward and return one gradient array per param (zeros if unused)."""
    for p in params:
        p.zero_grad()
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bwd)


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bwd)


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), bwd)


def relu(x):
    out = np.maximum(x.data, 0)

    def bwd(g):
        x.accumulate(g * (x.data > 0))

    return _node(out, (x,), bwd)


def leaky_relu(x, slope=0.1):
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)

    def bwd(g):
        x.accumulate(g * np.where(mask, 1.0, slope))

    return _node(out, (x,), bwd)


def exp(x):
    out = np.exp(x.data)

    def bwd(g):
        x.accumulate(g * out)

    return _node(out, (x,), bwd)


def log(x):
    out = np.log(x.data)

    def bwd(g):
        x.accumulate(g / x.data)

    return _node(out, (x,), bwd)


def sin(x):
    out = np.sin(x.data)

    def bwd(g):
        x.accumulate(g * np.cos(x.data))

    return _node(out, (x,), bwd)


def cos(x):
    out = np.cos(x.data)

    def bwd(g):
        x.accumulate(-g * np.sin(x.data))

    return _node(out, (x,), bwd)


def sqrt(x):
    out = np.sqrt(x.data)

    def bwd(g):
        x.accumulate(g * 0.5 / out)

    return _node(out, (x,), bwd)


def tanh(x):
    out = np.tanh(x.data)

    def bwd(g):
        x.accumulate(g * (1.0 - out * out))

    return _node(out, (x,), bwd)


def sigmoid(x):
    # split by sign so exp never overflows
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    out = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        x.accumulate(g * out * (1.0 - out))

    return _node(out, (x,), bwd)


def absolute(x):
    out = np.abs(x.data)

    def bwd(g):
        x.accumulate(g * np.sign(x.data))

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    out = x.data.reshape(shape)

    def bwd(g):
        x.accumulate(g.reshape(x.data.shape))

    return _node(out, (x,), bwd)


def transpose(x, axes):
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        x.accumulate(g.transpose(inv))

    return _node(out, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate(piece)

    return _node(out, tuple(tensors), bwd)


def tensor_slice(x, key):
    out = x.data[key]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[key] += g
        x.accumulate(full)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _node(out, (x,), bwd)


def tensor_mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.data.size / out.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape) / scale)

    return _node(out, (x,), bwd)


def tensor_var(x, axis=None, keepdims=False):
    """Biased variance, composed from mean/sub/mul so the backward is free."""
    centered = sub(x, tensor_mean(x, axis, keepdims=True))
    return tensor_mean(mul(centered, centered), axis, keepdims)


# ---------------------------------------------------------------------------
# linear algebra / nn primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        a.accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        b.accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(out, (a, b), bwd)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate(out * (g - dot))

    return _node(out, (x,), bwd)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        sm = np.exp(out)
        x.accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), bwd)


def cross_entropy_with_logits(logits, targets, reduction="mean"):
    """Softmax cross-entropy against integer class targets.

    `logits` has classes along the last axis; `targets` is an integer array of
    the leading shape.  Returns the mean (default) or sum of per-position
    negative log-likelihoods.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    logp = log_softmax(logits, axis=-1)
    flat = reshape(logp, (-1, logits.data.shape[-1]))
    picked = take_rows(flat, targets.reshape(-1))
    nll = -1.0 * picked
    if reduction == "mean":
        return tensor_mean(nll)
    if reduction == "sum":
        return tensor_sum(nll)
    raise ValueError(f"unknown reduction {reduction!r}")


def take_rows(x, idx):
    """Gather x[i, idx[i]] for a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        x.accumulate(full)

    return _node(out, (x,), bwd)


def embedding_lookup(table, indices):
    """Row lookup into a (vocab, dim) table by an integer index array."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError("embedding index out of range")
    out = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table.accumulate(full)

    return _node(out, (table,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    mu = tensor_mean(x, axis=-1, keepdims=True)
    var = tensor_var(x, axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(sub(x, mu), inv), gamma), beta)


# ---------------------------------------------------------------------------
# gradient routing


def stop_gradient(x):
    """Treat `x` as a constant: identity forward, no gradient flows back."""
    return Tensor(x.data)


def straight_through(forward_value, gradient_carrier):
    """Forward `forward_value`, route all gradient to `gradient_carrier`.

    The Jacobian towards the carrier is the identity; `forward_value` is
    treated as constant.  Shapes must match exactly.
    """
    if forward_value.data.shape != gradient_carrier.data.shape:
        raise ShapeError(
            f"straight_through shapes differ: {forward_value.shape} vs "
            f"{gradient_carrier.shape}"
        )

    def bwd(g):
        gradient_carrier.accumulate(g)

    return _node(forward_value.data.copy(), (gradient_carrier,), bwd)
