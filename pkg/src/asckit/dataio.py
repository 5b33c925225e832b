"""Dataset ingestion and the synthetic scene generator.

WAV support covers RIFF PCM16/PCM24/IEEE-float32, one or two channels.
Manifests are TSV ("filename<TAB>scene_label") whose file names follow the
scene-city-location-segment-device grammar.  The synthetic generator emits
frequency-coded classes so that small networks can separate them quickly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .rng import TAG_SYNTH, stream

SCENE_CLASSES = (
    "airport", "bus", "metro", "metro_station", "park", "public_square",
    "shopping_mall", "street_pedestrian", "street_traffic", "tram",
)
CLASS_INDEX = {name: i for i, name in enumerate(SCENE_CLASSES)}

CITIES = (
    "amsterdam", "barcelona", "helsinki", "lisbon", "london", "lyon",
    "madrid", "milan", "prague", "paris", "stockholm", "vienna",
)


@dataclass(frozen=True)
class ManifestRow:
    path: str          # as written in the manifest (possibly with audio/ prefix)
    scene: str
    city: str
    location: str
    segment: str
    device: str

    @property
    def segment_id(self):
        return Path(self.path).stem

    @property
    def label(self):
        return CLASS_INDEX[self.scene]


def parse_manifest(text, strict=False):
    """Parse manifest TSV; returns (rows, errors) with errors as
    (line_number, message).  In strict mode the first error raises."""
    lines = text.splitlines()
    rows = []
    errors = []

    def bad(lineno, msg):
        if strict:
            raise FormatError(f"manifest line {lineno}: {msg}")
        errors.append((lineno, msg))

    if not lines:
        return rows, errors
    header = lines[0].rstrip("\n")
    if header.split("\t")[:2] != ["filename", "scene_label"]:
        raise FormatError(
            "manifest must start with a 'filename<TAB>scene_label' header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            bad(lineno, "expected two tab-separated fields")
            continue
        path, scene = parts[0].strip(), parts[1].strip()
        stem = Path(path).stem
        fields = stem.split("-")
        if len(fields) != 5:
            bad(lineno, f"filename {stem!r} does not match "
                        "scene-city-location-segment-device")
            continue
        fscene, city, location, segment, device = fields
        if scene not in CLASS_INDEX:
            bad(lineno, f"unknown scene label {scene!r}")
            continue
        if fscene != scene:
            bad(lineno, f"filename scene {fscene!r} disagrees with label {scene!r}")
            continue
        if not location:
            bad(lineno, "empty location id")
            continue
        rows.append(ManifestRow(path=path, scene=scene, city=city,
                                location=location, segment=segment,
                                device=device))
    return rows, errors


# ---------------------------------------------------------------------------
# WAV codec

def decode_wav(blob):
    """RIFF/WAVE bytes -> (samples [n, channels] float64 in [-1, 1], rate)."""
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE container", offset=0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"chunk {cid!r} truncated", offset=pos)
        if cid == b"fmt ":
            fmt = (body, pos + 8)
        elif cid == b"data":
            data = (body, pos + 8)
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError("missing fmt chunk", offset=12)
    if data is None:
        raise FormatError("missing data chunk", offset=12)
    body, fmt_off = fmt
    if len(body) < 16:
        raise FormatError("fmt chunk too small", offset=fmt_off)
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
    if audio_format == 0xFFFE and len(body) >= 26:
        (audio_format,) = struct.unpack_from("<H", body, 24)
    if channels not in (1, 2):
        raise FormatError(f"unsupported channel count {channels}", offset=fmt_off)
    raw, data_off = data
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(raw[:len(raw) - len(raw) % (2 * channels)],
                                dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 1 and bits == 24:
        usable = len(raw) - len(raw) % (3 * channels)
        b = np.frombuffer(raw[:usable], dtype=np.uint8).reshape(-1, 3)
        vals = (b[:, 0].astype(np.int32)
                | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        vals = np.where(vals >= 1 << 23, vals - (1 << 24), vals)
        samples = vals.astype(np.float64) / float(1 << 23)
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(raw[:len(raw) - len(raw) % (4 * channels)],
                                dtype="<f4").astype(np.float64)
    else:
        raise FormatError(
            f"unsupported codec (format {audio_format}, {bits}-bit)",
            offset=data_off)
    return samples.reshape(-1, channels), rate


def encode_wav_pcm16(samples, rate):
    """(n,) or (n, channels) float in [-1, 1] -> RIFF PCM16 bytes."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    quantized = np.clip(np.round(arr * 32768.0), -32768, 32767).astype("<i2")
    payload = quantized.tobytes()
    channels = arr.shape[1]
    byte_rate = rate * channels * 2
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16, 1, channels,
        rate, byte_rate, channels * 2, 16, b"data", len(payload))
    return header + payload


# ---------------------------------------------------------------------------
# synthetic scene dataset

SYNTH_RATE = 48000
SYNTH_SECONDS = 10.0


def _class_signature(k, n, rng):
    """Band-passed noise around a class center plus an AM tone."""
    center = 250.0 * (1.45 ** k)
    t = np.arange(n) / SYNTH_RATE
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / SYNTH_RATE)
    band = (freqs >= center / 1.3) & (freqs <= center * 1.3)
    spec[~band] = 0.0
    noise = np.fft.irfft(spec, n)
    noise *= 0.1 / max(np.sqrt((noise ** 2).mean()), 1e-12)
    am_rate = 1.5 + 0.7 * k
    phase = rng.uniform(0, 2 * np.pi)
    tone = 0.08 * np.sin(2 * np.pi * (center * 1.19) * t + phase)
    tone *= 0.5 + 0.5 * np.sin(2 * np.pi * am_rate * t)
    return noise + tone


def synth_dataset(out_dir, n_classes=10, per_class=4, seed=0):
    """Write a synthetic scene corpus: audio/*.wav plus meta.csv.

    Class k is identifiable by its noise band center; files of one class are
    spread over >= 4 recording locations.  Deterministic per seed.
    Returns the manifest path.
    """
    if per_class < 4:
        raise InputError("per_class must be >= 4 so four folds are possible")
    out = Path(out_dir)
    audio = out / "audio"
    try:
        audio.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    n = int(SYNTH_RATE * SYNTH_SECONDS)
    n_locations = max(4, per_class // 4)
    lines = ["filename\tscene_label"]
    file_index = 0
    for k in range(n_classes):
        scene = SCENE_CLASSES[k]
        for j in range(per_class):
            rng = stream(seed, TAG_SYNTH, file_index)
            sig = _class_signature(k, n, rng)
            gain = rng.uniform(0.5, 1.0)
            left = gain * sig + 0.003 * rng.standard_normal(n)
            right = gain * sig + 0.003 * rng.standard_normal(n)
            stereo = np.stack([left, right], axis=1)
            peak = np.abs(stereo).max()
            if peak > 0.95:
                stereo *= 0.95 / peak
            location = str(100 * k + (j % n_locations))
            city = CITIES[(k + j) % len(CITIES)]
            name = f"{scene}-{city}-{location}-{file_index}-a.wav"
            (audio / name).write_bytes(encode_wav_pcm16(stereo, SYNTH_RATE))
            lines.append(f"audio/{name}\t{scene}")
            file_index += 1
    manifest = out / "meta.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
