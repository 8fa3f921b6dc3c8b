"""Toy audio signal family and synthetic multi-level feature generators.

Four fixed random "encoders" stand in for pretrained feature extractors:
each frames the signal at its native rate, applies a seeded projection and a
tanh, and yields (frames, dims) features.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

SR = 800
FUSED_RATE = 25.0
TOKEN_RATE = 12.5
# (dims, native Hz) per level: semantic, phonetic, phonetic-2, acoustic
LEVELS = ((32, 25.0), (32, 50.0), (24, 50.0), (24, 25.0))
ALIGN_LEVELS = (0, 1)


@dataclass
class FeatureSeq:
    data: np.ndarray
    frame_rate: float
    pad: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatch(f"feature data must be (frames, channels), got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def n_frames(duration: float, rate: float) -> int:
    return int(round(duration * rate))


def toy_signal(duration: float, seed: int = 0, sr: int = SR) -> np.ndarray:
    """Band-limited sum of a few slowly modulated sinusoids in [-1, 1]."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(duration * sr))) / sr
    x = np.zeros_like(t)
    for _ in range(rng.integers(2, 5)):
        f = rng.uniform(20.0, sr / 4)
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.2, 1.0) * am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    peak = np.abs(x).max() if x.size else 1.0
    return 0.9 * x / max(peak, 1e-9)


def _frames(x: np.ndarray, hop: int, win: int, count: int) -> np.ndarray:
    pad = np.concatenate([x, np.zeros(win + hop * count)])
    idx = np.arange(count)[:, None] * hop + np.arange(win)[None, :]
    return pad[idx]


def level_features(x: np.ndarray, level: int, sr: int = SR) -> FeatureSeq:
    dims, rate = LEVELS[level]
    hop = int(round(sr / rate))
    win = 2 * hop
    count = n_frames(len(x) / sr, rate)
    proj = np.random.default_rng(1000 + level).normal(0.0, 1.0 / np.sqrt(win), (win, dims))
    fr = _frames(x, hop, win, count) * np.hanning(win)
    return FeatureSeq(np.tanh(3.0 * fr @ proj), rate)


def synthetic_levels(x: np.ndarray, sr: int = SR) -> list[FeatureSeq]:
    """Native-rate features for all four levels."""
    return [level_features(x, i, sr) for i in range(len(LEVELS))]


def resample(fs: FeatureSeq, rate: float) -> FeatureSeq:
    """Linear interpolation of each channel onto a ``rate`` Hz grid."""
    if fs.frame_rate == rate:
        return FeatureSeq(fs.data.copy(), rate)
    dur = fs.n_frames / fs.frame_rate
    m = n_frames(dur, rate)
    src = np.arange(fs.n_frames) / fs.frame_rate
    dst = np.arange(m) / rate
    out = np.stack([np.interp(dst, src, fs.data[:, c]) for c in range(fs.dim)], 1) if m else np.zeros((0, fs.dim))
    return FeatureSeq(out, rate)


def common_rate_levels(x: np.ndarray, sr: int = SR) -> list[FeatureSeq]:
    return [resample(f, FUSED_RATE) for f in synthetic_levels(x, sr)]


def write_wav(path, x: np.ndarray, sr: int = SR) -> None:
    pcm = np.clip(np.round(np.asarray(x) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError("expected mono 16-bit PCM")
        sr = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767, sr
