"""Executable networks: parameters + forward pass derived from a NetworkSpec."""

from __future__ import annotations

import numpy as np

from . import layers as L
from . import tensor as tt
from .errors import ConfigError
from .rng import TAG_INIT, stream
from .tensor import Tensor


class Network:
    """Parameters, batchnorm running stats, and the forward pass for a spec.

    Parameter tensors are keyed "<layer name>.<W|b|u|gamma|beta>" in layer
    order, which fixes the checkpoint payload layout.
    """

    def __init__(self, spec, params, bn_stats, dtype):
        self.spec = spec
        self.params = params          # dict[str, Tensor], insertion-ordered
        self.bn_stats = bn_stats      # dict[str, RunningStats]
        self.dtype = dtype

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, spec, seed=0, dtype=np.float32):
        """He/Glorot initialization drawn from the (seed, init) stream."""
        rng = stream(seed, TAG_INIT)
        params = {}
        bn_stats = {}

        def par(name, arr):
            params[name] = Tensor(arr.astype(dtype), requires_grad=True)

        for lay in spec.layers:
            if lay.kind == "conv2d":
                kh, kw = lay.kernel
                fan_in = kh * kw * lay.in_ch
                par(f"{lay.name}.W", rng.standard_normal(
                    (kh, kw, lay.in_ch, lay.out_ch)) * np.sqrt(2.0 / fan_in))
                par(f"{lay.name}.b", np.zeros(lay.out_ch))
            elif lay.kind == "conv1d":
                fan_in = len(lay.offsets) * lay.in_ch
                par(f"{lay.name}.W", rng.standard_normal(
                    (len(lay.offsets), lay.in_ch, lay.out_ch)) * np.sqrt(2.0 / fan_in))
                par(f"{lay.name}.b", np.zeros(lay.out_ch))
            elif lay.kind == "dense":
                scale = np.sqrt(2.0 / lay.in_ch) if lay.activation else np.sqrt(1.0 / lay.in_ch)
                par(f"{lay.name}.W", rng.standard_normal(
                    (lay.in_ch, lay.out_ch)) * scale)
                par(f"{lay.name}.b", np.zeros(lay.out_ch))
            elif lay.kind == "batchnorm":
                par(f"{lay.name}.gamma", np.ones(lay.length))
                par(f"{lay.name}.beta", np.zeros(lay.length))
                bn_stats[lay.name] = L.RunningStats(lay.length, dtype=dtype)
            elif lay.kind == "attention_pool":
                d = lay.d
                limit = np.sqrt(6.0 / (2 * d))
                par(f"{lay.name}.W", rng.uniform(-limit, limit, (d, d)))
                par(f"{lay.name}.b", np.zeros(d))
                par(f"{lay.name}.u", rng.standard_normal(d) / np.sqrt(d))
        return cls(spec, params, bn_stats, dtype)

    # -- forward ------------------------------------------------------------

    def forward(self, x, training=False, rng=None):
        """Map a batched input tensor to pre-softmax class scores [B, 10].

        2-d topologies take [B, mel, T, 1]; 1-d ones take [B, T, mel].
        Train mode needs ``rng`` when the spec contains dropout layers.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        p = self.params
        for lay in self.spec.layers:
            k = lay.kind
            if k == "conv2d":
                x = L.conv2d(x, p[f"{lay.name}.W"], p[f"{lay.name}.b"])
                if lay.activation:
                    x = L.activation(x, lay.activation)
            elif k == "conv1d":
                x = L.conv1d_ctx(x, lay.offsets, p[f"{lay.name}.W"],
                                 p[f"{lay.name}.b"])
                if lay.activation:
                    x = L.activation(x, lay.activation)
            elif k == "maxpool":
                x = L.maxpool_freq(x)
            elif k == "mfm":
                x = L.mfm(x)
            elif k == "batchnorm":
                x = L.batchnorm(x, p[f"{lay.name}.gamma"], p[f"{lay.name}.beta"],
                                self.bn_stats[lay.name], lay.axis, training)
            elif k == "dropout":
                x = L.dropout(x, lay.rate, training, rng)
            elif k == "attention_pool":
                x = L.attention_pool(x, p[f"{lay.name}.W"], p[f"{lay.name}.b"],
                                     p[f"{lay.name}.u"], use_std=lay.use_std,
                                     spatial=(self.spec.input_kind == "2d"))
            elif k == "flatten":
                x = tt.reshape(x, (x.shape[0], -1))
            elif k == "dense":
                x = L.dense(x, p[f"{lay.name}.W"], p[f"{lay.name}.b"])
                if lay.activation:
                    x = L.activation(x, lay.activation)
            else:
                raise ConfigError(f"unknown layer kind {k!r}")
        return x

    # -- bookkeeping --------------------------------------------------------

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def n_params(self):
        return sum(t.data.size for t in self.params.values())

    def snapshot(self):
        """Copy of all learnable state (for best-checkpoint tracking)."""
        return ({k: t.data.copy() for k, t in self.params.items()},
                {k: s.copy() for k, s in self.bn_stats.items()})

    def restore(self, snap):
        arrays, stats = snap
        for k, arr in arrays.items():
            self.params[k].data = arr.copy()
        for k, s in stats.items():
            self.bn_stats[k] = s.copy()
