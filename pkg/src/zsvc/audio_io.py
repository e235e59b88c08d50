"""Mono PCM audio: WAV reading/writing and windowed-sinc resampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import FormatError, ValidationError

PCM16_SCALE = 32768.0
_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE

# resampler: Kaiser-windowed sinc, 64 taps per polyphase branch
TAPS_PER_PHASE = 64
KAISER_BETA = 8.6


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("audio samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise FormatError(f"chunk {cid!r} truncated", offset=pos)
        yield cid, body, size
        pos = body + size + (size & 1)


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file; stereo is averaged to mono."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file", offset=0)
    fmt = None
    payload = None
    for cid, body, size in _chunks(data):
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too short", offset=body)
            fmt = struct.unpack_from("<HHIIHH", data, body)
            if fmt[0] == _FMT_EXTENSIBLE and size >= 40:
                sub = struct.unpack_from("<H", data, body + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = (body, size)
    if fmt is None or payload is None:
        raise FormatError("missing fmt or data chunk")
    codec, channels, rate, _, _, bits = fmt
    if codec == _FMT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), PCM16_SCALE
    elif codec == _FMT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        name = {_FMT_PCM: "pcm", _FMT_FLOAT: "ieee-float"}.get(codec, f"format-tag-{codec}")
        raise ValidationError(f"unsupported codec {name} {bits}-bit")
    if channels not in (1, 2):
        raise ValidationError(f"unsupported channel count {channels}")
    body, size = payload
    frame = dtype.itemsize * channels
    n = size // frame
    x = np.frombuffer(data, dtype=dtype, count=n * channels, offset=body).astype(np.float64) / scale
    x = x.reshape(n, channels).mean(axis=1)
    return AudioClip(x, rate)


def quantize_pcm16(samples) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * PCM16_SCALE
    # round half away from zero
    q = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(clip: AudioClip, path) -> None:
    if len(clip) == 0:
        raise ValidationError("cannot write an empty clip")
    pcm = quantize_pcm16(clip.samples).tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _FMT_PCM, 1, clip.sample_rate,
                                   clip.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(pcm))
    Path(path).write_bytes(header + pcm)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling with a Kaiser-windowed sinc low-pass.

    Output length is ``round(N * target / source)``.
    """
    if target_rate <= 0:
        raise ValidationError(f"target_rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if target_rate == src:
        return clip
    g = gcd(src, target_rate)
    up, down = target_rate // g, src // g
    n_out = int(round(len(clip) * target_rate / src))
    cutoff = 1.0 / max(up, down)
    taps = signal.firwin(TAPS_PER_PHASE * max(up, down) + 1, cutoff, window=("kaiser", KAISER_BETA)) * up
    y = signal.resample_poly(clip.samples, up, down, window=taps)
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return AudioClip(y[:n_out], target_rate)
