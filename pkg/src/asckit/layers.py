"""Layer vocabulary for the three network topologies.

Convolutions are same-padding cross-correlations implemented as one GEMM per
kernel offset (shift-and-matmul), which keeps the whole batch inside BLAS.
All max-style ops break ties toward the first index.  Every op registers its
backward rule on the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from . import tensor as tt
from .tensor import Tensor, record


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; shapes and parameter counts
    derive from it in closed form without running data."""

    name: str
    kind: str  # conv2d | conv1d | maxpool | mfm | batchnorm | dense | dropout | attention_pool | flatten
    kernel: tuple = None          # conv2d (kh, kw)
    offsets: tuple = None         # conv1d relative time indices
    in_ch: int = None
    out_ch: int = None
    axis: str = None              # batchnorm: "frequency" | "feature"
    length: int = None            # batchnorm normalized-axis length
    rate: float = None            # dropout keep-out probability
    d: int = None                 # attention input channel width
    use_std: bool = False         # attention concatenates weighted std
    activation: str = None        # relu | leaky_relu applied after conv/dense


@dataclass(frozen=True)
class AttentionPoolConfig:
    d: int
    use_std: bool = False
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError(f"attention width must be positive, got {self.d}")


def _ensure_batched(x, ndim):
    if x.ndim == ndim:
        return x, False
    if x.ndim == ndim - 1:
        return tt.reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got {x.shape}")


def _squeeze_batch(out, squeezed):
    return tt.reshape(out, out.shape[1:]) if squeezed else out


# ---------------------------------------------------------------------------
# convolutions

def _offset_matmul(padded, kernel_mats, fdim, tdim, cout):
    """Sum over kernel offsets of patch @ kernel_mats[u, v].

    Streams one contiguous-slab copy per offset into BLAS; much friendlier
    to single-core memory bandwidth than an interleaved im2col buffer.
    """
    bsz = padded.shape[0]
    cin = padded.shape[3]
    kh, kw = kernel_mats.shape[:2]
    if cin <= 4:
        # tiny contraction depth: per-offset GEMMs degenerate, so gather a
        # patch matrix and run one GEMM at depth kh*kw*cin instead
        cols = np.empty((bsz, fdim, tdim, kh * kw * cin), dtype=padded.dtype)
        i = 0
        for u in range(kh):
            for v in range(kw):
                cols[..., i * cin:(i + 1) * cin] = padded[:, u:u + fdim, v:v + tdim, :]
                i += 1
        return cols.reshape(-1, kh * kw * cin) @ kernel_mats.reshape(kh * kw * cin, -1)
    acc = None
    for u in range(kh):
        for v in range(kw):
            patch = padded[:, u:u + fdim, v:v + tdim, :].reshape(-1, cin)
            term = patch @ kernel_mats[u, v]
            if acc is None:
                acc = term
            else:
                acc += term
    return acc


def conv2d(x, w, b=None):
    """Same-padding 2-D cross-correlation, one GEMM per kernel offset.

    x: [B, F, T, Cin] (or unbatched [F, T, Cin]); w: [kh, kw, Cin, Cout];
    b: [Cout] or None.
    """
    x, squeezed = _ensure_batched(x, 4)
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    bsz, fdim, tdim, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    acc = _offset_matmul(xp, w.data, fdim, tdim, cout)
    if b is not None:
        acc += b.data
    out = Tensor(acc.reshape(bsz, fdim, tdim, cout))

    def rule(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        if b is not None and b.requires_grad:
            b._accum_adjoint(g2.sum(axis=0))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, u:u + fdim, v:v + tdim, :].reshape(-1, cin)
                    dw[u, v] = patch.T @ g2
            w._accum_adjoint(dw)
        if x.requires_grad:
            # dX is the correlation of dY with the flipped, transposed kernel
            gp = np.pad(g2.reshape(bsz, fdim, tdim, cout),
                        ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            wb = w.data[::-1, ::-1].transpose(0, 1, 3, 2)
            dx = _offset_matmul(gp, wb, fdim, tdim, cin)
            x._accum_adjoint(dx.reshape(bsz, fdim, tdim, cin))

    inputs = (x, w) if b is None else (x, w, b)
    return _squeeze_batch(record(out, inputs, rule), squeezed)


def conv1d_ctx(x, offsets, w, b=None):
    """Time-context 1-D convolution: y[t] = sum_o x[t + o] @ W[o] + b.

    x: [B, T, Cin] (or [T, Cin]); offsets: relative time indices;
    w: [len(offsets), Cin, Cout].  Positions outside [0, T) read as zero.
    """
    if len(offsets) == 0:
        raise ConfigError("conv1d_ctx needs at least one offset")
    x, squeezed = _ensure_batched(x, 3)
    noff, cin, cout = w.shape
    if noff != len(offsets):
        raise ShapeError(
            f"conv1d_ctx kernel has {noff} taps for {len(offsets)} offsets")
    if x.shape[2] != cin:
        raise ShapeError(
            f"conv1d_ctx channel mismatch: input {x.shape} vs kernel {w.shape}")
    bsz, tdim, _ = x.shape
    lo = max(0, -min(offsets))
    hi = max(0, max(offsets))
    xp = np.pad(x.data, ((0, 0), (lo, hi), (0, 0)))
    wd = w.data
    acc = np.zeros((bsz * tdim, cout), dtype=x.dtype)
    for i, o in enumerate(offsets):
        acc += xp[:, o + lo:o + lo + tdim, :].reshape(-1, cin) @ wd[i]
    if b is not None:
        acc += b.data
    out = Tensor(acc.reshape(bsz, tdim, cout))

    def rule(g):
        g2 = g.reshape(-1, cout)
        if b is not None and b.requires_grad:
            b._accum_adjoint(g2.sum(axis=0))
        if w.requires_grad:
            dw = np.empty_like(wd)
            for i, o in enumerate(offsets):
                patch = xp[:, o + lo:o + lo + tdim, :].reshape(-1, cin)
                dw[i] = patch.T @ g2
            w._accum_adjoint(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i, o in enumerate(offsets):
                dxp[:, o + lo:o + lo + tdim, :] += (
                    g2 @ wd[i].T).reshape(bsz, tdim, cin)
            x._accum_adjoint(dxp[:, lo:lo + tdim, :])

    inputs = (x, w) if b is None else (x, w, b)
    return _squeeze_batch(record(out, inputs, rule), squeezed)


# ---------------------------------------------------------------------------
# pooling and channel max

def maxpool_freq(x):
    """Halve the frequency axis by max over non-overlapping pairs.

    Gradient routes to the argmax; ties go to the first (lower) bin.
    """
    x, squeezed = _ensure_batched(x, 4)
    bsz, fdim, tdim, ch = x.shape
    if fdim % 2 != 0:
        raise ShapeError(f"maxpool_freq needs an even frequency axis, got {fdim}")
    lo = x.data[:, 0::2]
    hi = x.data[:, 1::2]
    first_wins = lo >= hi
    out = Tensor(np.where(first_wins, lo, hi))

    def rule(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, 0::2] = np.where(first_wins, g, 0)
            dx[:, 1::2] = np.where(first_wins, 0, g)
            x._accum_adjoint(dx)

    return _squeeze_batch(record(out, (x,), rule), squeezed)


def mfm(x):
    """Max-feature-map: out[..., i] = max(x[..., i], x[..., i + C/2]).

    Halves the channel axis using the split-half pairing; ties route the
    gradient to the first element of the pair.
    """
    ch = x.shape[-1]
    if ch % 2 != 0:
        raise ShapeError(f"mfm needs an even channel count, got {ch}")
    half = ch // 2
    a = x.data[..., :half]
    b = x.data[..., half:]
    first_wins = a >= b
    out = Tensor(np.where(first_wins, a, b))

    def rule(g):
        if x.requires_grad:
            dx = np.concatenate(
                [np.where(first_wins, g, 0), np.where(first_wins, 0, g)],
                axis=-1)
            x._accum_adjoint(dx)

    return record(out, (x,), rule)


# ---------------------------------------------------------------------------
# batch normalization

class RunningStats:
    """Mutable running mean/variance owned by a network instance."""

    def __init__(self, length, dtype=np.float32):
        self.mean = np.zeros(length, dtype=dtype)
        self.var = np.ones(length, dtype=dtype)

    def copy(self):
        out = RunningStats(len(self.mean), dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def _bn_axes(x, axis):
    if axis == "frequency":
        if x.ndim != 4:
            raise ShapeError(
                f"frequency batchnorm expects [B,F,T,C], got {x.shape}")
        return 1
    if axis == "feature":
        return x.ndim - 1
    raise ConfigError(f"unknown batchnorm axis {axis!r}")


def batchnorm(x, gamma, beta, stats, axis, training, momentum=0.9, eps=1e-5):
    """Normalize over every non-parameter axis; affine with gamma/beta.

    Train mode uses batch statistics (biased variance) and folds them into
    ``stats`` with the given momentum; infer mode applies the running stats.
    Input must carry a batch axis: [B,F,T,C] for axis="frequency", any
    [B, ..., d] for axis="feature".
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm needs a batched input, got {x.shape}")
    param_ax = _bn_axes(x, axis)
    length = x.shape[param_ax]
    if gamma.shape != (length,) or beta.shape != (length,):
        raise ShapeError(
            f"batchnorm parameters sized {gamma.shape} for axis length {length}")
    reduce_axes = tuple(i for i in range(x.ndim) if i != param_ax)
    count = int(np.prod([x.shape[i] for i in reduce_axes]))
    if count == 0:
        raise InputError("batchnorm train mode received a zero-size batch")
    bshape = tuple(length if i == param_ax else 1 for i in range(x.ndim))
    gb = gamma.data.reshape(bshape)
    bb = beta.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=reduce_axes, keepdims=True)
        var = x.data.var(axis=reduce_axes, keepdims=True)
        stats.mean *= momentum
        stats.mean += (1.0 - momentum) * mu.reshape(length).astype(stats.mean.dtype)
        stats.var *= momentum
        stats.var += (1.0 - momentum) * var.reshape(length).astype(stats.var.dtype)
    else:
        mu = stats.mean.astype(x.dtype).reshape(bshape)
        var = stats.var.astype(x.dtype).reshape(bshape)

    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = Tensor(gb * xhat + bb)

    def rule(g):
        if beta.requires_grad:
            beta._accum_adjoint(g.sum(axis=reduce_axes))
        if gamma.requires_grad:
            gamma._accum_adjoint((g * xhat).sum(axis=reduce_axes))
        if x.requires_grad:
            if training:
                gsum = g.sum(axis=reduce_axes, keepdims=True)
                gx = (g * xhat).sum(axis=reduce_axes, keepdims=True)
                x._accum_adjoint(
                    gb * inv * (g - gsum / count - xhat * gx / count))
            else:
                x._accum_adjoint(g * gb * inv)

    return record(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# dropout and dense helpers

def dropout(x, rate, training, rng=None):
    """Inverted dropout: train mode zeroes units with probability ``rate``
    and scales survivors by 1/(1-rate); infer mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    out = Tensor(x.data * keep * scale)

    def rule(g):
        if x.requires_grad:
            x._accum_adjoint(g * keep * scale)

    return record(out, (x,), rule)


def dense(x, w, b):
    """Affine layer: x @ W + b."""
    return tt.add(tt.matmul(x, w), b)


def activation(x, kind):
    if kind == "relu":
        return tt.relu(x)
    if kind == "leaky_relu":
        return tt.leaky_relu(x, 0.01)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# self-attentive statistics pooling

def attention_pool(x, w, b, u, use_std=False, eps=1e-6, spatial=None):
    """Collapse the time axis into attention-weighted statistics.

    Frame scores are e_t = u . tanh(W m_t + b) where m_t is the frame's
    channel vector (for spatial inputs, the frequency-averaged channel
    vector); weights are softmax(e) over time.

    - sequences [B, T, d] (or [T, d]): returns the weighted mean [B, d],
      concatenated with the weighted standard deviation when ``use_std``.
    - spatial maps [B, F, T, C] (or [F, T, C] with spatial=True): one weight
      per frame pools the full F x C slice, returning [B, F, C].

    A 3-D input is read as [B, T, d]; pass spatial=True for a single
    [F, T, C] map.
    """
    if spatial is None:
        spatial = x.ndim == 4
    x, squeezed = _ensure_batched(x, 4 if spatial else 3)
    if x.shape[-2] == 0:
        raise InputError("attention_pool needs at least one frame")
    frames = tt.tmean(x, axis=1) if spatial else x  # [B, T, C]
    scores = tt.matmul(tt.tanh(tt.add(tt.matmul(frames, w), b)), u)  # [B, T]
    wts = tt.softmax(scores, axis=-1)

    if spatial:
        weighted = tt.mul(x, tt.reshape(wts, (x.shape[0], 1, x.shape[2], 1)))
        pooled = tt.tsum(weighted, axis=2)  # [B, F, C]
    else:
        w3 = tt.reshape(wts, (x.shape[0], x.shape[1], 1))
        mean = tt.tsum(tt.mul(x, w3), axis=1)  # [B, d]
        if use_std:
            diff = tt.sub(x, tt.reshape(mean, (x.shape[0], 1, x.shape[2])))
            var = tt.tsum(tt.mul(w3, tt.mul(diff, diff)), axis=1)
            std = tt.sqrt(tt.add(var, eps))
            pooled = tt.concat([mean, std], axis=-1)
        else:
            pooled = mean

    return _squeeze_batch(pooled, squeezed)


def attention_weights(x, w, b, u, spatial=None):
    """Forward-only view of the per-frame softmax weights (diagnostics)."""
    if spatial is None:
        spatial = x.ndim == 4
    x, _ = _ensure_batched(x, 4 if spatial else 3)
    frames = x.data.mean(axis=1) if spatial else x.data
    e = np.tanh(frames @ w.data + b.data) @ u.data
    z = np.exp(e - e.max(axis=-1, keepdims=True))
    wts = z / z.sum(axis=-1, keepdims=True)
    return wts[0] if wts.shape[0] == 1 else wts


# ---------------------------------------------------------------------------
# shape and parameter-count oracles

def layer_param_count(spec: LayerSpec) -> int:
    """Closed-form learnable-parameter count for one layer."""
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        return kh * kw * spec.in_ch * spec.out_ch + spec.out_ch
    if spec.kind == "conv1d":
        return len(spec.offsets) * spec.in_ch * spec.out_ch + spec.out_ch
    if spec.kind == "dense":
        return spec.in_ch * spec.out_ch + spec.out_ch
    if spec.kind == "batchnorm":
        return 4 * spec.length
    if spec.kind == "attention_pool":
        return spec.d * spec.d + 2 * spec.d
    return 0


def layer_output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Propagate a symbolic input shape (no batch axis) through one layer.

    2-D stages use (F, T, C); 1-D stages use (T, d); after pooling the time
    axis is gone.
    """
    k = spec.kind
    if k == "conv2d":
        f, t, c = in_shape
        if c != spec.in_ch:
            raise ShapeError(f"{spec.name}: expected {spec.in_ch} channels, got {c}")
        return (f, t, spec.out_ch)
    if k == "conv1d":
        t, c = in_shape
        if c != spec.in_ch:
            raise ShapeError(f"{spec.name}: expected {spec.in_ch} features, got {c}")
        return (t, spec.out_ch)
    if k == "maxpool":
        f, t, c = in_shape
        if f % 2:
            raise ShapeError(f"{spec.name}: odd frequency axis {f}")
        return (f // 2, t, c)
    if k == "mfm":
        f, t, c = in_shape
        if c % 2:
            raise ShapeError(f"{spec.name}: odd channel count {c}")
        return (f, t, c // 2)
    if k == "batchnorm":
        expect = in_shape[0] if spec.axis == "frequency" else in_shape[-1]
        if expect != spec.length:
            raise ShapeError(
                f"{spec.name}: normalized axis is {expect}, spec says {spec.length}")
        return in_shape
    if k == "dropout":
        return in_shape
    if k == "attention_pool":
        if len(in_shape) == 3:
            f, t, c = in_shape
            return (f, c)
        t, d = in_shape
        return (2 * d,) if spec.use_std else (d,)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "dense":
        if in_shape != (spec.in_ch,):
            raise ShapeError(f"{spec.name}: expected ({spec.in_ch},), got {in_shape}")
        return (spec.out_ch,)
    raise ConfigError(f"unknown layer kind {k!r}")
