"""Declarative builders for the three network topologies.

Each builder emits a NetworkSpec whose ordered LayerSpec list mirrors the
topology's layer card row by row; parameter counts and the executable graph
both derive from it.  ``width_scale`` divides every channel width (the
classifier head stays at 10 classes), which the desk-scale experiments use.

The shipped deviation table (data/table_deviations.tsv) lists the layer
cards whose published parameter figures disagree with the closed-form count
implied by their own input/output widths.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError, ShapeError
from .layers import LayerSpec, layer_output_shape, layer_param_count

N_CLASSES = 10
N_MELS = 256


@dataclass(frozen=True)
class NetworkSpec:
    name: str                 # vgg | lcnn | xvector
    layers: tuple             # ordered LayerSpec rows
    input_kind: str           # "2d": (256, N, 1) maps; "1d": (N, 256) sequences
    n_mels: int = N_MELS
    n_classes: int = N_CLASSES
    width_scale: int = 1

    def input_shape(self, n_frames):
        if self.input_kind == "2d":
            return (self.n_mels, n_frames, 1)
        return (n_frames, self.n_mels)

    def to_dict(self):
        rows = []
        for l in self.layers:
            row = {k: getattr(l, k) for k in (
                "name", "kind", "kernel", "offsets", "in_ch", "out_ch",
                "axis", "length", "rate", "d", "use_std", "activation")}
            rows.append(row)
        return {"name": self.name, "input_kind": self.input_kind,
                "n_mels": self.n_mels, "n_classes": self.n_classes,
                "width_scale": self.width_scale, "layers": rows}

    @staticmethod
    def from_dict(d):
        layers = []
        for row in d["layers"]:
            row = dict(row)
            for k in ("kernel", "offsets"):
                if row.get(k) is not None:
                    row[k] = tuple(row[k])
            layers.append(LayerSpec(**row))
        return NetworkSpec(name=d["name"], layers=tuple(layers),
                           input_kind=d["input_kind"], n_mels=d["n_mels"],
                           n_classes=d["n_classes"],
                           width_scale=d.get("width_scale", 1))


def spec_hash(spec: NetworkSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _scaled(width, scale):
    if width % scale:
        raise ConfigError(f"width {width} is not divisible by scale {scale}")
    return width // scale


def build_vgg(width_scale=1, dropout_rate=0.2) -> NetworkSpec:
    """Six blocks of paired 3x3 convolutions with frequency-halving pools,
    mean-only attentive pooling over time, then a three-layer classifier."""
    s = width_scale
    chans = [_scaled(c, s) for c in (32, 64, 128, 256, 256, 256)]
    hidden = _scaled(256, s)
    layers = []
    in_ch = 1
    for i, ch in enumerate(chans, start=1):
        for j in (1, 2):
            layers.append(LayerSpec(
                name=f"Conv2D-{i}-{j}", kind="conv2d", kernel=(3, 3),
                in_ch=in_ch, out_ch=ch, activation="relu"))
            in_ch = ch
        layers.append(LayerSpec(name=f"MaxPooling-{i}", kind="maxpool"))
    att_d = chans[-1]
    layers.append(LayerSpec(name="AttentionPooling", kind="attention_pool",
                            d=att_d, use_std=False))
    layers.append(LayerSpec(name="Flatten", kind="flatten"))
    flat = 4 * att_d
    layers.append(LayerSpec(name="Dense1", kind="dense", in_ch=flat,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="Dense2", kind="dense", in_ch=hidden,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="Dense (softmax)", kind="dense",
                            in_ch=hidden, out_ch=N_CLASSES))
    return NetworkSpec(name="vgg", layers=tuple(layers), input_kind="2d",
                       width_scale=s)


# (conv shape, in->out channels) per block, transcribed from the layer card;
# conv inputs follow the preceding MFM output (its Output-column channels)
_LCNN_PLAN = [
    # block: [(kernel, out_ch), ...]; batchnorm sits after the first MFM
    ((5, 5), 32, None),
    ((1, 1), 32, 128),
    ((3, 3), 64, None),
    ((1, 1), 64, 64),
    ((3, 3), 128, None),
    ((1, 1), 96, 32),
    ((3, 3), 128, None),
    ((1, 1), 128, 16),
    ((3, 3), 160, None),
    ((1, 1), 192, 8),
    ((3, 3), 192, None),
]


def build_lcnn(width_scale=1, dropout_rate=0.2) -> NetworkSpec:
    """Max-feature-map CNN: 5x5 stem then alternating 1x1/3x3 convolutions,
    each MFM halving channels, per-frequency batchnorm, frequency pools."""
    s = width_scale
    layers = []
    in_ch = 1
    freq = 256
    block = 1
    sub = 1
    bn_index = 1
    for kernel, out_ch, bn_freq in _LCNN_PLAN:
        out_ch = _scaled(out_ch, s)
        layers.append(LayerSpec(name=f"Conv2D-{block}-{sub}", kind="conv2d",
                                kernel=kernel, in_ch=in_ch, out_ch=out_ch))
        layers.append(LayerSpec(name=f"MFM-{block}-{sub}", kind="mfm"))
        in_ch = out_ch // 2
        if bn_freq is not None:
            layers.append(LayerSpec(name=f"BatchNorm-{bn_index}",
                                    kind="batchnorm", axis="frequency",
                                    length=bn_freq))
            bn_index += 1
        if kernel == (3, 3) or block == 1:
            layers.append(LayerSpec(name=f"MaxPooling-{block}", kind="maxpool"))
            freq //= 2
            block += 1
            sub = 1
        else:
            sub += 1
    att_d = in_ch
    hidden = _scaled(256, s)
    layers.append(LayerSpec(name="AttentionPooling", kind="attention_pool",
                            d=att_d, use_std=False))
    layers.append(LayerSpec(name="Flatten", kind="flatten"))
    layers.append(LayerSpec(name="Dense1", kind="dense", in_ch=4 * att_d,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="Dense2", kind="dense", in_ch=hidden,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="Dense (softmax)", kind="dense",
                            in_ch=hidden, out_ch=N_CLASSES))
    return NetworkSpec(name="lcnn", layers=tuple(layers), input_kind="2d",
                       width_scale=s)


_XVEC_OFFSETS = [(-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (-4, 0, 4), (0,), (0,)]


def build_xvector(width_scale=1, dropout_rate=0.2) -> NetworkSpec:
    """Time-context 1-D CNN with attentive mean+std pooling: five context
    layers at width 256 and one widening to 768, then a dense classifier."""
    s = width_scale
    width = _scaled(256, s)
    wide = _scaled(768, s)
    hidden = _scaled(256, s)
    layers = []
    in_ch = 256  # mel bands enter as features
    for i, offs in enumerate(_XVEC_OFFSETS, start=1):
        out_ch = wide if i == len(_XVEC_OFFSETS) else width
        layers.append(LayerSpec(name=f"Conv1D-{i}", kind="conv1d",
                                offsets=offs, in_ch=in_ch, out_ch=out_ch,
                                activation="relu"))
        layers.append(LayerSpec(name=f"BatchNorm-{i}", kind="batchnorm",
                                axis="feature", length=out_ch))
        layers.append(LayerSpec(name=f"Dropout-{i}", kind="dropout",
                                rate=dropout_rate))
        in_ch = out_ch
    layers.append(LayerSpec(name="AttentionPooling", kind="attention_pool",
                            d=wide, use_std=True))
    layers.append(LayerSpec(name="Dense1", kind="dense", in_ch=2 * wide,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="BatchNorm-7", kind="batchnorm",
                            axis="feature", length=hidden))
    layers.append(LayerSpec(name="Dropout-7", kind="dropout",
                            rate=dropout_rate))
    layers.append(LayerSpec(name="Dense2", kind="dense", in_ch=hidden,
                            out_ch=hidden, activation="leaky_relu"))
    layers.append(LayerSpec(name="BatchNorm-8", kind="batchnorm",
                            axis="feature", length=hidden))
    layers.append(LayerSpec(name="Dense3 (softmax)", kind="dense",
                            in_ch=hidden, out_ch=N_CLASSES))
    return NetworkSpec(name="xvector", layers=tuple(layers), input_kind="1d",
                       width_scale=s)


BUILDERS = {"vgg": build_vgg, "lcnn": build_lcnn, "xvector": build_xvector,
            "xvec": build_xvector}


def build(topology, width_scale=1, dropout_rate=0.2) -> NetworkSpec:
    if topology not in BUILDERS:
        raise ConfigError(f"unknown topology {topology!r}; expected vgg, lcnn or xvec")
    return BUILDERS[topology](width_scale=width_scale, dropout_rate=dropout_rate)


# ---------------------------------------------------------------------------
# oracles over specs

def infer_shapes(spec: NetworkSpec, n_frames):
    """Chain symbolic shapes through the spec; returns [(name, shape)]."""
    shape = spec.input_shape(n_frames)
    out = []
    for layer in spec.layers:
        shape = layer_output_shape(layer, shape)
        out.append((layer.name, shape))
    return out


def param_count(spec: NetworkSpec):
    """Per-layer and total learnable-parameter counts, in layer order."""
    per_layer = [(l.name, layer_param_count(l)) for l in spec.layers]
    return per_layer, sum(c for _, c in per_layer)


def validate(spec: NetworkSpec, n_frames=128):
    """Check chaining and the 10-way softmax head; raises on violation."""
    shapes = infer_shapes(spec, n_frames)
    last = spec.layers[-1]
    if last.kind != "dense" or last.out_ch != spec.n_classes:
        raise ShapeError(
            f"{spec.name}: final layer must be a {spec.n_classes}-way dense head")
    if shapes[-1][1] != (spec.n_classes,):
        raise ShapeError(f"{spec.name}: head emits {shapes[-1][1]}")
    return shapes


# ---------------------------------------------------------------------------
# deviation table

def load_deviation_table():
    """Rows of the shipped deviation table as dicts."""
    text = resources.files("asckit").joinpath("data/table_deviations.tsv").read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
