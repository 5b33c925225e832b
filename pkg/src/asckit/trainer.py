"""Training regime: random crops, Adam, linear LR decay, early stopping.

Each epoch draws a fresh contiguous 128-frame crop per training segment,
runs minibatch Adam on the cross-entropy, then scores the full 512-frame
validation segments in inference mode.  The best-validation-loss state is
kept and returned as the checkpoint.  All randomness flows through counter
streams keyed by (seed, tag, epoch, index), so runs replay exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .errors import (ConfigError, ContractError, FormatError, InputError,
                     IntegrityError, NumericError)
from .layers import RunningStats
from .network import Network
from .rng import TAG_CROP, TAG_DROPOUT, TAG_SHUFFLE, stream
from .tensor import Tape, Tensor
from .topologies import NetworkSpec, spec_hash

CKPT_MAGIC = b"ASCM"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 0.001
    lr_final: float = 1e-6
    decay_start_epoch: int = 50
    max_epochs: int = 500
    batch_size: int = 128
    patience: int = 100
    crop_len: int = 128
    seed: int = 0
    dropout_rate: float = 0.2

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr0:
            raise ConfigError(
                f"need 0 < lr_final <= lr0, got {self.lr_final} / {self.lr0}")
        if self.crop_len > 512:
            raise ConfigError(f"crop_len {self.crop_len} exceeds 512 frames")
        if self.max_epochs <= self.decay_start_epoch:
            raise ConfigError("max_epochs must exceed decay_start_epoch")
        if self.batch_size < 1 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive")


@dataclass
class Segment:
    segment_id: str
    label: int
    features: np.ndarray  # [256, 512]


# ---------------------------------------------------------------------------
# schedule, crops, Adam

def lr_schedule(epoch, cfg: TrainConfig | None = None):
    """Constant until the decay start, then linear down to lr_final at the
    final epoch (endpoints exact)."""
    cfg = cfg or TrainConfig()
    if not 1 <= epoch <= cfg.max_epochs:
        raise ContractError(
            f"epoch {epoch} outside [1, {cfg.max_epochs}]")
    if epoch <= cfg.decay_start_epoch:
        return cfg.lr0
    if epoch == cfg.max_epochs:
        return cfg.lr_final
    frac = (epoch - cfg.decay_start_epoch) / (cfg.max_epochs - cfg.decay_start_epoch)
    return cfg.lr0 + frac * (cfg.lr_final - cfg.lr0)


def sample_crop(features, rng, crop_len=128):
    """Contiguous crop of ``crop_len`` frames, start uniform over all valid
    positions."""
    n = features.shape[1]
    if n < crop_len:
        raise InputError(f"{n} frames is fewer than the crop length {crop_len}")
    start = int(rng.integers(0, n - crop_len + 1))
    return features[:, start:start + crop_len]


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def adam_step(params, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter tensor."""
    state.t += 1
    t = state.t
    correct1 = 1.0 - beta1 ** t
    correct2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / correct1
        vhat = v / correct2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# per-band feature standardization (computed on the training fold)

@dataclass
class FeatureNorm:
    mean: np.ndarray  # [n_mels]
    std: np.ndarray   # [n_mels]

    def apply(self, values):
        out = (values - self.mean[:, None]) / self.std[:, None]
        return out.astype(np.float32, copy=False)


def compute_feature_norm(segments):
    if not segments:
        raise InputError("cannot compute feature statistics of an empty set")
    n_mels = segments[0].features.shape[0]
    total = np.zeros(n_mels)
    total_sq = np.zeros(n_mels)
    count = 0
    for seg in segments:
        v = seg.features.astype(np.float64)
        total += v.sum(axis=1)
        total_sq += (v * v).sum(axis=1)
        count += v.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return FeatureNorm(mean=mean.astype(np.float32), std=std.astype(np.float32))


# ---------------------------------------------------------------------------
# checkpoint

@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict               # name -> float32 ndarray
    bn_stats: dict             # name -> RunningStats
    norm: FeatureNorm
    config: dict               # TrainConfig echo
    best_epoch: int
    best_val_loss: float

    def network(self, dtype=np.float32):
        net = Network.initialize(self.spec, seed=0, dtype=dtype)
        for k, arr in self.params.items():
            net.params[k].data = arr.astype(dtype, copy=True)
        for k, s in self.bn_stats.items():
            net.bn_stats[k] = s.copy()
        return net


def _orient(batch, spec: NetworkSpec):
    """Stack normalized [256, T] feature crops into the network's layout."""
    if spec.input_kind == "2d":
        return batch[..., None]                 # [B, 256, T, 1]
    return np.ascontiguousarray(batch.transpose(0, 2, 1))  # [B, T, 256]


def save_checkpoint(path, ckpt: Checkpoint):
    tensors = []
    payload = []
    offset = 0

    def put(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes

    for name, arr in ckpt.params.items():
        put(name, arr)
    for name, s in ckpt.bn_stats.items():
        put(f"{name}.running_mean", s.mean)
        put(f"{name}.running_var", s.var)
    put("feature_norm.mean", ckpt.norm.mean)
    put("feature_norm.std", ckpt.norm.std)

    header = {
        "spec": ckpt.spec.to_dict(),
        "spec_hash": spec_hash(ckpt.spec),
        "tensors": tensors,
        "config": ckpt.config,
        "best_epoch": ckpt.best_epoch,
        "best_val_loss": ckpt.best_val_loss,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(bytes([CKPT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    if blob[4] != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {blob[4]}", offset=4)
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    base = 9 + hlen
    spec = NetworkSpec.from_dict(header["spec"])
    if spec_hash(spec) != header["spec_hash"]:
        raise IntegrityError(f"{path}: spec hash does not match its contents")
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + 4 * n
        if end > len(blob):
            raise FormatError(f"{path}: truncated tensor payload", offset=start)
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=start).reshape(shape).copy()

    params = {}
    bn_stats = {}
    for name, arr in arrays.items():
        if name.endswith(".running_mean"):
            bn_stats.setdefault(name[:-13], RunningStats(len(arr))).mean = arr
        elif name.endswith(".running_var"):
            bn_stats.setdefault(name[:-12], RunningStats(len(arr))).var = arr
        elif name.startswith("feature_norm."):
            continue
        else:
            params[name] = arr
    norm = FeatureNorm(mean=arrays["feature_norm.mean"],
                       std=arrays["feature_norm.std"])
    return Checkpoint(spec=spec, params=params, bn_stats=bn_stats, norm=norm,
                      config=header["config"], best_epoch=header["best_epoch"],
                      best_val_loss=header["best_val_loss"])


def verify_topology(ckpt: Checkpoint, spec: NetworkSpec):
    if spec_hash(ckpt.spec) != spec_hash(spec):
        raise IntegrityError(
            f"checkpoint topology {ckpt.spec.name} (scale "
            f"{ckpt.spec.width_scale}) does not match requested {spec.name} "
            f"(scale {spec.width_scale})")


# ---------------------------------------------------------------------------
# training loop

def _score_split(net, segments, norm, spec, batch=8):
    """Full-segment inference: (mean loss, accuracy, scores [N, 10])."""
    losses = []
    scores = np.empty((len(segments), spec.n_classes), dtype=np.float32)
    correct = 0
    for i in range(0, len(segments), batch):
        chunk = segments[i:i + batch]
        x = _orient(np.stack([norm.apply(s.features) for s in chunk]), spec)
        y = np.array([s.label for s in chunk])
        logits = net.forward(Tensor(x), training=False)
        loss = tt.softmax_cross_entropy(logits, y)
        losses.append(loss.item() * len(chunk))
        scores[i:i + len(chunk)] = logits.data
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return (sum(losses) / len(segments), correct / len(segments), scores)


def train(spec: NetworkSpec, train_set, val_set, cfg: TrainConfig,
          log=None) -> Checkpoint:
    """Optimize ``spec`` on ``train_set``, early-stopping on ``val_set``.

    ``log`` receives one tab-separated line per epoch:
    epoch, lr, train loss, val loss, val accuracy.
    """
    if not train_set:
        raise InputError("training set is empty")
    if not val_set:
        raise InputError("validation set is empty")
    train_ids = {s.segment_id for s in train_set}
    if any(s.segment_id in train_ids for s in val_set):
        raise InputError("train and validation sets share segments")

    norm = compute_feature_norm(train_set)
    net = Network.initialize(spec, seed=cfg.seed, dtype=np.float32)
    adam = AdamState(net.params)
    best_loss = np.inf
    best_epoch = 0
    best_snap = None

    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_schedule(epoch, cfg)
        order = stream(cfg.seed, TAG_SHUFFLE, epoch).permutation(len(train_set))
        epoch_loss = 0.0
        for step_i, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch_idx = order[lo:lo + cfg.batch_size]
            crops = []
            labels = []
            for i in batch_idx:
                seg = train_set[i]
                crop = sample_crop(seg.features,
                                   stream(cfg.seed, TAG_CROP, epoch, int(i)),
                                   cfg.crop_len)
                crops.append(norm.apply(crop))
                labels.append(seg.label)
            x = _orient(np.stack(crops), spec)
            y = np.array(labels)
            with Tape() as tape:
                logits = net.forward(Tensor(x), training=True,
                                     rng=stream(cfg.seed, TAG_DROPOUT, epoch, step_i))
                loss = tt.softmax_cross_entropy(logits, y)
                if not np.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite training loss at epoch {epoch} step {step_i}")
                net.zero_grads()
                tape.backward(loss)
            adam_step(net.params, adam, lr)
            epoch_loss += loss.item() * len(batch_idx)
        train_loss = epoch_loss / len(order)

        val_loss, val_acc, _ = _score_split(net, val_set, norm, spec)
        if log is not None:
            log(f"{epoch}\t{lr:.8g}\t{train_loss:.6f}\t{val_loss:.6f}\t{val_acc:.4f}")

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_snap = net.snapshot()
        elif epoch - best_epoch >= cfg.patience:
            break

    params, bn_stats = best_snap
    return Checkpoint(spec=spec,
                      params={k: v.astype(np.float32) for k, v in params.items()},
                      bn_stats=bn_stats, norm=norm, config=asdict(cfg),
                      best_epoch=best_epoch, best_val_loss=float(best_loss))


# ---------------------------------------------------------------------------
# inference

def predict_segments(ckpt: Checkpoint, features_list, batch=8):
    """Pre-softmax scores [N, 10] for full feature matrices."""
    net = ckpt.network()
    out = np.empty((len(features_list), ckpt.spec.n_classes), dtype=np.float32)
    for i in range(0, len(features_list), batch):
        chunk = features_list[i:i + batch]
        x = _orient(np.stack([ckpt.norm.apply(f) for f in chunk]), ckpt.spec)
        out[i:i + len(chunk)] = net.forward(Tensor(x), training=False).data
    return out


def predict_segment(ckpt: Checkpoint, features):
    """Pre-softmax scores [10] for one full 256 x 512 feature matrix."""
    return predict_segments(ckpt, [features], batch=1)[0]
