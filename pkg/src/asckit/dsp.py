"""Log-mel feature frontend.

A 10 s segment becomes a 256 x 512 matrix of natural-log mel-band energies:
mono mixdown, mean removal, polyphase resample to 22050 Hz, Hamming-window
STFT (2048-sample window, 430-sample hop, reflect-centered), a 256-band
area-normalized mel filterbank spanning 0-11025 Hz, then log with a 1e-10
floor.  The time axis is standardized to exactly 512 frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import upfirdn

from .errors import ConfigError, FormatError, InputError

TARGET_RATE = 22050
SUPPORTED_RATES = (48000, 44100, 22050)
WIN_LENGTH = 2048
HOP_LENGTH = 430
N_MELS = 256
N_FFT_BINS = WIN_LENGTH // 2 + 1
N_FRAMES = 512
LOG_FLOOR = 1e-10
KAISER_BETA = 8.6
ZERO_CROSSINGS = 64

CACHE_MAGIC = b"ASCF"
CACHE_VERSION = 1


@dataclass
class AudioSegment:
    samples: np.ndarray  # mono float64
    sample_rate: int


@dataclass
class LogMelFeatures:
    values: np.ndarray  # [n_mels, n_frames] float64, natural log

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# preprocessing

def _resample_taps(up, down):
    """Windowed-sinc anti-aliasing filter on the up-rate grid.

    Cutoff pi/max(up, down), Kaiser window, ZERO_CROSSINGS sinc zeros per
    side, passband gain ``up`` so amplitude survives zero-stuffing.
    """
    m = max(up, down)
    half = ZERO_CROSSINGS * m
    n = np.arange(-half, half + 1, dtype=np.float64)
    taps = (up / m) * np.sinc(n / m)
    taps *= np.kaiser(2 * half + 1, KAISER_BETA)
    return taps, half


def resample(x, src_rate, dst_rate):
    """Polyphase resample of a 1-D signal; output length ceil(n*up/down)."""
    if src_rate == dst_rate:
        return x.astype(np.float64, copy=True)
    ratio = Fraction(dst_rate, src_rate)
    up, down = ratio.numerator, ratio.denominator
    taps, half = _resample_taps(up, down)
    y = upfirdn(taps, x.astype(np.float64), up=up, down=down)
    offset = half // down  # group delay (len(taps)-1)/2 at the up-rate
    n_out = -(-len(x) * up // down)
    return y[offset:offset + n_out]


def preprocess(raw, src_rate):
    """Multi-channel audio at a supported rate -> mono 22050 Hz, zero mean."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise InputError("empty audio signal")
    if src_rate not in SUPPORTED_RATES:
        raise ConfigError(
            f"unsupported sample rate {src_rate}; expected one of {SUPPORTED_RATES}")
    mono = raw if raw.ndim == 1 else raw.mean(axis=1)
    mono = mono - mono.mean()
    out = resample(mono, src_rate, TARGET_RATE)
    out -= out.mean()  # filter edge transients can leave a tiny residual bias
    return AudioSegment(samples=out, sample_rate=TARGET_RATE)


# ---------------------------------------------------------------------------
# spectrogram

def stft_power(seg: AudioSegment, win=WIN_LENGTH, hop=HOP_LENGTH):
    """Power spectrogram [win//2+1, T] with T = floor(n/hop) + 1.

    Frames are reflect-centered at t*hop and Hamming windowed (periodic).
    """
    if seg.sample_rate != TARGET_RATE:
        raise InputError(
            f"stft_power expects {TARGET_RATE} Hz input, got {seg.sample_rate}")
    x = seg.samples
    n = len(x)
    if n < win:
        raise InputError(
            f"signal of {n} samples is too short to frame (need >= {win})")
    n_frames = n // hop + 1
    pad = win // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx]
    window = np.hamming(win + 1)[:-1]  # periodic form
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


# ---------------------------------------------------------------------------
# mel filterbank (Slaney convention: linear below 1 kHz, log above)

_F_SP = 200.0 / 3.0
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOG_STEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    mel = f / _F_SP
    above = f >= _MIN_LOG_HZ
    mel = np.where(above, _MIN_LOG_MEL + np.log(np.maximum(f, 1e-30) / _MIN_LOG_HZ) / _LOG_STEP, mel)
    return mel


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * _F_SP
    above = m >= _MIN_LOG_MEL
    return np.where(above, _MIN_LOG_HZ * np.exp(_LOG_STEP * (m - _MIN_LOG_MEL)), f)


def mel_filterbank(n_mels=N_MELS, n_fft_bins=N_FFT_BINS, sr=TARGET_RATE):
    """Triangular area-normalized filters [n_mels, n_fft_bins].

    Each filter is scaled by 2/(f_upper - f_lower); supports tile the band
    0..sr/2 with no gaps.
    """
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    fmax = sr / 2.0
    pts = mel_to_hz(np.linspace(0.0, float(hz_to_mel(fmax)), n_mels + 2))
    bin_freqs = np.linspace(0.0, fmax, n_fft_bins)
    fb = np.zeros((n_mels, n_fft_bins))
    for i in range(n_mels):
        lo, ctr, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (bin_freqs - lo) / (ctr - lo)
        down = (hi - bin_freqs) / (hi - ctr)
        fb[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    if not fb.any(axis=1).all():
        raise ConfigError(
            f"{n_mels} mel bands exceed the resolvable bands of {n_fft_bins} fft bins")
    return fb


def filter_centers(n_mels=N_MELS, sr=TARGET_RATE):
    """Center frequency (Hz) of each mel band."""
    return mel_to_hz(np.linspace(0.0, float(hz_to_mel(sr / 2.0)), n_mels + 2))[1:-1]


# ---------------------------------------------------------------------------
# log-mel features

def log_mel(seg: AudioSegment, n_frames=N_FRAMES):
    """Natural-log mel energies, standardized to exactly ``n_frames``."""
    power = stft_power(seg)
    fb = mel_filterbank()
    mel = fb @ power
    values = np.log(np.maximum(mel, LOG_FLOOR))
    t = values.shape[1]
    if t > n_frames:
        values = values[:, :n_frames]
    elif t < n_frames:
        flooring = np.full((values.shape[0], n_frames - t), math.log(LOG_FLOOR))
        values = np.concatenate([values, flooring], axis=1)
    return LogMelFeatures(values=values)


def extract_features(raw, src_rate):
    """One-shot pipeline: raw audio -> LogMelFeatures."""
    return log_mel(preprocess(raw, src_rate))


# ---------------------------------------------------------------------------
# feature cache file: magic "ASCF", version byte, u32 n_mels, u32 n_frames,
# then float32 little-endian row-major (mel band major)

def write_feature_cache(path, features: LogMelFeatures):
    values = np.ascontiguousarray(features.values, dtype="<f4")
    n_mels, n_frames = values.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(bytes([CACHE_VERSION]))
        fh.write(struct.pack("<II", n_mels, n_frames))
        fh.write(values.tobytes())


def read_feature_cache(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a feature cache file", offset=0)
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    if blob[4] != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {blob[4]}", offset=4)
    n_mels, n_frames = struct.unpack_from("<II", blob, 5)
    expect = 13 + 4 * n_mels * n_frames
    if len(blob) != expect:
        raise FormatError(
            f"{path}: payload is {len(blob) - 13} bytes, header implies {expect - 13}",
            offset=13)
    values = np.frombuffer(blob, dtype="<f4", offset=13).reshape(n_mels, n_frames)
    return LogMelFeatures(values=values.copy())
