"""Objective scores for converted audio: SECS, STOI and log-mel L1."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio_io import AudioClip, resample
from .dsp import SpectroConfig, frame_signal, log_mel
from .errors import ValidationError
from .speaker import SpeakerEncoder, encode_speaker

STOI_RATE = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames, 384 ms
STOI_CLIP_DB = -15.0
STOI_DYN_RANGE = 40.0


@dataclass(frozen=True)
class MetricReport:
    secs_vs_reference: float
    secs_vs_source: float
    stoi_vs_source: float
    mel_l1_vs_source: float

    def __post_init__(self):
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValidationError(f"metric {f.name} is not finite")

    def to_text(self) -> str:
        return "".join(f"{k}={v:.6f}\n" for k, v in asdict(self).items())


def _at_rate(clip: AudioClip, rate: int) -> AudioClip:
    return clip if clip.sample_rate == rate else resample(clip, rate)


def secs(a: AudioClip, b: AudioClip, eval_encoder: SpeakerEncoder, cfg: SpectroConfig = SpectroConfig()) -> float:
    """Cosine similarity of speaker embeddings from an independent evaluation encoder."""
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("secs needs non-empty clips")
    ea = encode_speaker(log_mel(_at_rate(a, cfg.sample_rate), cfg), eval_encoder)
    eb = encode_speaker(log_mel(_at_rate(b, cfg.sample_rate), cfg), eval_encoder)
    return float(np.clip(ea.vector @ eb.vector, -1.0, 1.0))


def third_octave_matrix(fs: int = STOI_RATE, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Binary band-assignment matrix, ``n_bands x (nfft/2 + 1)``; edges snapped to FFT bins."""
    freqs = np.arange(nfft // 2 + 1) * fs / nfft
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    out = np.zeros((n_bands, freqs.size))
    for i in range(n_bands):
        a = int(np.argmin((freqs - lo[i]) ** 2))
        b = int(np.argmin((freqs - hi[i]) ** 2))
        out[i, a:b] = 1.0
    return out


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frames(x: np.ndarray) -> np.ndarray:
    n = 1 + (len(x) - STOI_FRAME) // STOI_HOP
    idx = np.arange(STOI_FRAME)[None, :] + STOI_HOP * np.arange(n)[:, None]
    return x[idx] * _stoi_window()


def _overlap_add(frames: np.ndarray) -> np.ndarray:
    out = np.zeros((len(frames) - 1) * STOI_HOP + STOI_FRAME)
    for i, f in enumerate(frames):
        out[i * STOI_HOP:i * STOI_HOP + STOI_FRAME] += f
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray):
    """Drop frames more than 40 dB below the loudest clean frame, then re-synthesize both signals."""
    fx, fy = _frames(x), _frames(y)
    energy = 20.0 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - STOI_DYN_RANGE
    return _overlap_add(fx[keep]), _overlap_add(fy[keep])


def _band_envelopes(x: np.ndarray, bands: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x), STOI_NFFT, axis=1)
    return np.sqrt(bands @ (np.abs(spec) ** 2).T)  # bands x frames


def stoi(clean: AudioClip, degraded: AudioClip) -> float:
    """Short-time objective intelligibility at 10 kHz over 384 ms envelope segments."""
    x = _at_rate(clean, STOI_RATE).samples
    y = _at_rate(degraded, STOI_RATE).samples
    if abs(len(x) - len(y)) > STOI_FRAME:
        raise ValidationError(f"clip durations differ by more than one frame ({len(x)} vs {len(y)} samples)")
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if not np.any(x != 0):
        raise ValidationError("clean clip is silent")
    if n < STOI_FRAME:
        raise ValidationError("clips are shorter than one STOI segment")
    x, y = remove_silent_frames(x, y)
    bands = third_octave_matrix()
    ex, ey = _band_envelopes(x, bands), _band_envelopes(y, bands)
    n_frames = ex.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValidationError(f"clips are shorter than one STOI segment ({n_frames} < {STOI_SEGMENT} frames)")
    clip_factor = 1.0 + 10.0 ** (-STOI_CLIP_DB / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = ex[:, m - STOI_SEGMENT:m]
        ys = ey[:, m - STOI_SEGMENT:m]
        ny = np.linalg.norm(ys, axis=1, keepdims=True)
        nx = np.linalg.norm(xs, axis=1, keepdims=True)
        alpha = np.where(ny > 0, nx / np.where(ny > 0, ny, 1.0), 0.0)
        ys = np.minimum(alpha * ys, clip_factor * xs)
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1)
        ok = denom > 1e-12 * (np.linalg.norm(xs, axis=1) ** 2 + 1e-300)
        scores.extend(((xc * yc).sum(axis=1)[ok] / denom[ok]).tolist())
    if not scores:
        raise ValidationError("no band segment carries envelope variation")
    return float(np.mean(scores))


def mel_l1(a: AudioClip, b: AudioClip, cfg: SpectroConfig = SpectroConfig()) -> float:
    ma = log_mel(_at_rate(a, cfg.sample_rate), cfg).frames
    mb = log_mel(_at_rate(b, cfg.sample_rate), cfg).frames
    if ma.shape != mb.shape:
        raise ValidationError(f"mel frame counts differ: {ma.shape[0]} vs {mb.shape[0]}")
    return float(np.abs(ma - mb).mean())


def match_length(clip: AudioClip, like: AudioClip) -> AudioClip:
    """Trim or zero-pad ``clip`` to the length of ``like`` (converted output is hop-quantized)."""
    clip = _at_rate(clip, like.sample_rate)
    x = clip.samples[:len(like)]
    return AudioClip(np.pad(x, (0, len(like) - len(x))), like.sample_rate)


def evaluate(converted: AudioClip, source: AudioClip, reference: AudioClip, eval_encoder: SpeakerEncoder,
             cfg: SpectroConfig = SpectroConfig()) -> MetricReport:
    conv = match_length(converted, source)
    return MetricReport(
        secs_vs_reference=secs(conv, reference, eval_encoder, cfg),
        secs_vs_source=secs(conv, source, eval_encoder, cfg),
        stoi_vs_source=stoi(source, conv),
        mel_l1_vs_source=mel_l1(conv, source, cfg),
    )


def write_summary(rows: Sequence[tuple], path) -> None:
    """CSV batch summary: one row per (name, MetricReport)."""
    names = [f.name for f in fields(MetricReport)]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + names)
        for name, rep in rows:
            w.writerow([name] + [f"{getattr(rep, k):.6f}" for k in names])
