"""Dense tensors with tape-based reverse-mode automatic differentiation.

Design: define-by-run.  Ops execute eagerly on numpy buffers; when a Tape is
recording and an input requires gradients, the op appends its backward rule
to the tape.  Recording order is topological by construction, and backward
walks the list strictly in reverse.

Shape conventions used by the network code: 2-D feature maps are
(batch, frequency, time, channel); 1-D sequences are (batch, time, feature).
Gradients accumulate with += into ``.grad``; zero explicitly between steps.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_active_tape = None
_touched = None  # tensors holding a live adjoint during one backward pass


def active_tape():
    return _active_tape


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.ops = []  # (output tensor, backward rule)

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already recording in this context")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def backward(self, loss):
        """Populate grads of every tensor reachable from ``loss``.

        Adjoints live only for the duration of one call, so repeated calls
        without zeroing accumulate one full gradient each into ``.grad``.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}")
        touched = []
        global _touched
        _touched = touched
        try:
            loss._accum_adjoint(np.ones_like(loss.data))
            for out, rule in reversed(self.ops):
                g = out._adjoint
                if g is not None:
                    rule(g)
        finally:
            _touched = None
            for t in touched:
                if t.requires_grad:
                    t._accum_grad(t._adjoint)
                t._adjoint = None
                t._adjoint_borrowed = False


class Tensor:
    __slots__ = ("data", "_grad", "_adjoint", "_adjoint_borrowed", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self._grad = None
        self._adjoint = None
        self._adjoint_borrowed = False
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        """Accumulated gradient; zeros if nothing has flowed back."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accum_grad(self, g):
        if self._grad is None:
            # private copy: g may alias an adjoint buffer shared via views
            self._grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self._grad += g

    def _accum_adjoint(self, g):
        # first contribution borrows g (rules hand over fresh arrays); any
        # further contribution materializes an owned buffer, so borrowed
        # arrays -- possibly read-only views -- are never mutated
        if self._adjoint is None:
            self._adjoint = g
            self._adjoint_borrowed = True
            if _touched is not None:
                _touched.append(self)
        elif self._adjoint_borrowed:
            self._adjoint = self._adjoint + g
            self._adjoint_borrowed = False
        else:
            self._adjoint += g

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record(out, inputs, rule):
    """Attach a backward rule if a tape is recording and grads are needed."""
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape.ops.append((out, rule))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape))
                 if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data + b.data)

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_adjoint(_unbroadcast(g, b.shape))

    return record(out, (a, b), rule)


def sub(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data - b.data)

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum_adjoint(_unbroadcast(-g, b.shape))

    return record(out, (a, b), rule)


def mul(a, b):
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    out = Tensor(a.data * b.data)

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum_adjoint(_unbroadcast(g * a.data, b.shape))

    return record(out, (a, b), rule)


def neg(a):
    out = Tensor(-a.data)

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(-g)

    return record(out, (a,), rule)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product.  Supports (..., m, k) @ (k, n) and (..., k) @ (k,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or b.ndim > 2:
        raise ShapeError(f"matmul does not support shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    if b.ndim == 2:
        def rule(g):
            if a.requires_grad:
                a._accum_adjoint(np.matmul(g, b.data.T))
            if b.requires_grad:
                k, n = b.shape
                b._accum_adjoint(a.data.reshape(-1, k).T @ g.reshape(-1, n))
    else:  # b is a vector, contraction over the last axis of a
        def rule(g):
            if a.requires_grad:
                a._accum_adjoint(g[..., None] * b.data)
            if b.requires_grad:
                k = b.shape[0]
                b._accum_adjoint((a.data * g[..., None]).reshape(-1, k).sum(axis=0))

    return record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _expand_like(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(_expand_like(g, a.shape, axis, keepdims).astype(a.dtype, copy=False))

    return record(out, (a,), rule)


def tmean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.data.size, 1)

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(_expand_like(g, a.shape, axis, keepdims) / count)

    return record(out, (a,), rule)


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(g.reshape(a.shape))

    return record(out, (a,), rule)


def transpose(a, axes):
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(g.transpose(inv))

    return record(out, (a,), rule)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum_adjoint(p)

    return record(out, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a):
    out = Tensor(np.maximum(a.data, 0))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(g * (a.data > 0))

    return record(out, (a,), rule)


def leaky_relu(a, slope=0.01):
    out = Tensor(np.where(a.data > 0, a.data, a.data * a.dtype.type(slope)))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(np.where(a.data > 0, g, g * a.dtype.type(slope)))

    return record(out, (a,), rule)


def tanh(a):
    out = Tensor(np.tanh(a.data))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(g * (1.0 - out.data * out.data))

    return record(out, (a,), rule)


def sqrt(a):
    out = Tensor(np.sqrt(a.data))

    def rule(g):
        if a.requires_grad:
            a._accum_adjoint(g / (2.0 * out.data))

    return record(out, (a,), rule)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum_adjoint(y * (g - dot))

    return record(out, (a,), rule)


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits, targets):
    """Mean multiclass cross-entropy of softmax(logits) against class indices.

    Backward rule: (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D [batch, classes], got {logits.shape}")
    if not np.isfinite(logits.data).all():
        raise NumericError("non-finite logits passed to softmax_cross_entropy")
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(
            f"targets shape {targets.shape} does not match batch size {n}")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(
            f"target outside [0, {c}): {int(targets.min())}..{int(targets.max())}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), targets].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))
    probs = np.exp(logp)

    def rule(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), targets] -= 1.0
            logits._accum_adjoint(d * (g / n))

    return record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# gradient-check oracle

def finite_difference_check(f, x, h=1e-5, samples=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The analytic gradient is taken
    from a fresh tape; numeric derivatives are central differences with step
    ``h`` at ``samples`` coordinates (all coordinates when None).  The
    relative error at a coordinate is |a - n| / max(1e-12, |a| + |n|).
    NaNs propagate into the returned value.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    n_coords = flat.size
    if samples is None or samples >= n_coords:
        idx = np.arange(n_coords)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        idx = gen.choice(n_coords, size=samples, replace=False)

    worst = 0.0
    an = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(an[i] - num) / max(1e-12, abs(an[i]) + abs(num))
        if np.isnan(err) or err > worst:
            worst = err
            if np.isnan(err):
                break
    return float(worst)
