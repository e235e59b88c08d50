"""Spectral front end: STFT, HTK mel filterbank, log-mel, YIN pitch, pitch bins."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .audio_io import AudioClip
from .errors import ValidationError

LOG_FLOOR = 1e-5
YIN_THRESHOLD = 0.1
PITCH_BIN_FMIN = 50.0
PITCH_BIN_FMAX = 1100.0


@dataclass(frozen=True)
class SpectroConfig:
    sample_rate: int = 32000
    n_fft: int = 1024
    hop: int = 320
    win_length: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: Optional[float] = None

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if self.win_length > self.n_fft:
            raise ValidationError("win_length must not exceed n_fft")
        if self.hop <= 0:
            raise ValidationError("hop must be positive")
        if self.n_mels < 1:
            raise ValidationError("n_mels must be at least 1")
        if not (self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValidationError(f"need fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # T x n_mels, natural-log magnitudes
    config: SpectroConfig = field(default_factory=SpectroConfig)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class F0Track:
    f0_hz: np.ndarray
    voiced: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.f0_hz.shape[0]

    def transposed(self, semitones: float) -> "F0Track":
        return F0Track(self.f0_hz * 2.0 ** (semitones / 12.0), self.voiced.copy())


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, ``0.5 * (1 - cos(2 pi i / n))``."""
    if n < 1:
        raise ValidationError("window length must be >= 1")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def padded_window(cfg: SpectroConfig) -> np.ndarray:
    """Hann window of ``win_length`` centered inside ``n_fft`` samples."""
    w = np.zeros(cfg.n_fft)
    left = (cfg.n_fft - cfg.win_length) // 2
    w[left:left + cfg.win_length] = hann_window(cfg.win_length)
    return w


def frame_signal(x: np.ndarray, frame_length: int, hop: int, pad: int, mode: str = "reflect") -> np.ndarray:
    n = x.shape[0]
    if mode == "reflect" and n > 1:
        xp = np.pad(x, pad, mode="reflect")
    else:
        xp = np.pad(x, pad)
    n_frames = 1 + n // hop
    need = (n_frames - 1) * hop + frame_length
    if xp.shape[0] < need:
        xp = np.pad(xp, (0, need - xp.shape[0]))
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return xp[idx]


def _check_clip(clip: AudioClip, cfg: SpectroConfig):
    if clip.sample_rate != cfg.sample_rate:
        raise ValidationError(f"clip rate {clip.sample_rate} Hz does not match config rate {cfg.sample_rate} Hz")
    if len(clip) == 0:
        raise ValidationError("clip is empty")


def stft(clip: AudioClip, cfg: SpectroConfig = SpectroConfig()) -> np.ndarray:
    """Complex STFT, shape ``T x (n_fft/2 + 1)`` with ``T = 1 + N // hop``."""
    _check_clip(clip, cfg)
    frames = frame_signal(clip.samples, cfg.n_fft, cfg.hop, cfg.n_fft // 2)
    return np.fft.rfft(frames * padded_window(cfg), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectroConfig = SpectroConfig()) -> np.ndarray:
    """Un-normalized triangular HTK filters, ``n_mels x (n_fft/2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_freqs) * cfg.sample_rate / cfg.n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(cfg: SpectroConfig = SpectroConfig()) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def log_mel(clip: AudioClip, cfg: SpectroConfig = SpectroConfig()) -> MelSpectrogram:
    mag = np.abs(stft(clip, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), cfg)


def _cmnd(frames: np.ndarray, window: int, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalized difference for lags 0..tau_max, per frame."""
    n_frames, length = frames.shape
    size = 1 << int(np.ceil(np.log2(length + window)))
    spec_x = np.fft.rfft(frames, size, axis=1)
    spec_w = np.fft.rfft(frames[:, :window], size, axis=1)
    cross = np.fft.irfft(np.conj(spec_w) * spec_x, size, axis=1)[:, :tau_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy_shift = sq[:, taus + window] - sq[:, taus]
    diff = np.maximum(energy_shift[:, :1] + energy_shift - 2.0 * cross, 0.0)
    cum = np.cumsum(diff[:, 1:], axis=1)
    out = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = diff[:, 1:] * taus[1:] / cum
    return out


def estimate_f0(clip: AudioClip, f0_min: float = 50.0, f0_max: float = 1100.0,
                cfg: SpectroConfig = SpectroConfig()) -> F0Track:
    """YIN pitch on hop-aligned frames; same frame count as :func:`log_mel`."""
    _check_clip(clip, cfg)
    sr = cfg.sample_rate
    if not (0 < f0_min < f0_max < sr / 2):
        raise ValidationError(f"need 0 < f0_min < f0_max < {sr / 2}")
    tau_min = max(2, int(np.floor(sr / f0_max)))
    tau_max = int(np.ceil(sr / f0_min))
    window = cfg.win_length
    length = window + tau_max + 1
    frames = frame_signal(clip.samples, length, cfg.hop, window // 2, mode="constant")
    energy = np.sum(frames[:, :window] ** 2, axis=1)
    d = _cmnd(frames, window, tau_max + 1)

    n = frames.shape[0]
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    silent = energy <= 1e-10 * window
    for t in range(n):
        if silent[t]:
            continue
        row = d[t]
        below = np.nonzero(row[tau_min:tau_max + 1] < YIN_THRESHOLD)[0]
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 <= tau_max and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if abs(denom) > 1e-12 else 0.0
        period = tau + float(np.clip(shift, -1.0, 1.0))
        hz = sr / period
        if f0_min <= hz <= f0_max:
            f0[t] = hz
            voiced[t] = True
    return F0Track(f0, voiced)


def f0_to_bins(track: F0Track, n_bins: int = 256) -> np.ndarray:
    """Code 0 is unvoiced; voiced f0 maps log-linearly onto 1..n_bins-1."""
    if n_bins < 2:
        raise ValidationError("n_bins must be >= 2")
    codes = np.zeros(track.n_frames, dtype=np.int64)
    v = track.voiced & (track.f0_hz > 0)
    if n_bins == 2:
        codes[v] = 1
        return codes
    pos = (np.log(track.f0_hz[v]) - np.log(PITCH_BIN_FMIN)) / (np.log(PITCH_BIN_FMAX) - np.log(PITCH_BIN_FMIN))
    codes[v] = np.clip(1 + np.rint(pos * (n_bins - 2)), 1, n_bins - 1).astype(np.int64)
    return codes
