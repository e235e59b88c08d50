"""Frame-level content features: providers, SVCF files, k-means and RVQ compression."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .dsp import MelSpectrogram
from .errors import FormatError, ValidationError

SVCF_MAGIC = b"SVCF"
SVCF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class Mode(str, enum.Enum):
    TENSOR = "tensor"
    CODES = "codes"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown quantization mode {value!r} (tensor|codes)") from None


@dataclass(frozen=True)
class ContentFeatures:
    frames: np.ndarray  # T x D

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValidationError(f"content features must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("content features must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def truncate(self, n_frames: int) -> "ContentFeatures":
        return ContentFeatures(self.frames[:n_frames])


# --- SVCF matrix files -----------------------------------------------------

def save_matrix(matrix, path) -> None:
    m = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if m.ndim != 2:
        raise ValidationError(f"SVCF holds 2-D matrices, got shape {m.shape}")
    Path(path).write_bytes(_HEADER.pack(SVCF_MAGIC, SVCF_VERSION, m.shape[0], m.shape[1]) + m.tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"SVCF header truncated: {len(data)} bytes", offset=len(data))
    magic, version, rows, cols = _HEADER.unpack_from(data, 0)
    if magic != SVCF_MAGIC:
        raise FormatError(f"bad SVCF magic {magic!r}", offset=0)
    if version != SVCF_VERSION:
        raise FormatError(f"unsupported SVCF version {version}", offset=4)
    expected = _HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"SVCF payload is {len(data) - _HEADER.size} bytes, header says {rows}x{cols}",
                          offset=min(len(data), expected))
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).copy()


def save_features(features: ContentFeatures, path) -> None:
    save_matrix(features.frames, path)


def load_features(path) -> ContentFeatures:
    return ContentFeatures(load_matrix(path).astype(np.float64))


def save_codes(codes, path) -> None:
    """Integer code streams are stored as an SVCF matrix, one column per stage."""
    c = np.asarray(codes)
    if c.ndim == 1:
        c = c[:, None]
    if c.size and (c.min() < 0 or c.max() >= 1 << 24):
        raise ValidationError("codes must lie in [0, 2^24) to be stored exactly")
    save_matrix(c.astype(np.float32), path)


def load_codes(path) -> np.ndarray:
    return load_matrix(path).astype(np.int64)


# --- providers -------------------------------------------------------------

def projection_matrix(n_in: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_in, dim))
    if dim <= n_in:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    q, r = np.linalg.qr(g.T)
    return (q * np.sign(np.diag(r))).T


def synthetic_content(mel: MelSpectrogram, seed: int = 0, dim: int = 64) -> ContentFeatures:
    """Seeded orthonormal projection of each log-mel frame, standardized over the clip."""
    if dim < 1:
        raise ValidationError("dim must be >= 1")
    x = mel.frames @ projection_matrix(mel.frames.shape[1], dim, seed)
    x = x - x.mean(axis=0)
    std = x.std(axis=0)
    return ContentFeatures(x / np.where(std > 1e-12, std, 1.0))


@dataclass(frozen=True)
class ContentProvider:
    """Either a synthetic projection of log-mel or a directory of SVCF files.

    The file-backed provider looks up ``<dir>/<clip name>.svcf``.
    """

    kind: str = "synthetic"
    seed: int = 0
    dim: int = 64
    root: Optional[str] = None

    @classmethod
    def parse(cls, spec: str, seed: int = 0, dim: int = 64) -> "ContentProvider":
        if spec == "synthetic":
            return cls("synthetic", seed, dim)
        if spec.startswith("file:"):
            return cls("file", seed, dim, spec[5:])
        raise ValidationError(f"unknown content provider {spec!r} (synthetic|file:PATH)")

    def features(self, mel: MelSpectrogram, name: Optional[str] = None) -> ContentFeatures:
        if self.kind == "synthetic":
            return synthetic_content(mel, self.seed, self.dim)
        path = Path(self.root)
        if path.is_dir():
            if name is None:
                raise ValidationError("file-backed provider needs a clip name")
            path = path / f"{name}.svcf"
        return load_features(path)


def concat_features(a: ContentFeatures, b: ContentFeatures) -> ContentFeatures:
    t = min(a.n_frames, b.n_frames)
    return ContentFeatures(np.concatenate([a.frames[:t], b.frames[:t]], axis=1))


# --- k-means ---------------------------------------------------------------

@dataclass
class KMeansCodebook:
    centroids: np.ndarray
    iterations: int = 0
    inertia: float = float("nan")
    inertia_trace: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def pairwise_sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``c`` for each row of ``x``; ties go to the lowest index.

    The expanded-norm distance is only used to shortlist; candidates within
    rounding distance of the minimum are re-scored exactly.
    """
    d = pairwise_sq_dists(x, c)
    best = d.min(axis=1)
    scale = (x * x).sum(1) + (c * c).sum(1).max()
    slack = 1e-9 * (scale + 1.0)
    close = d <= (best + slack)[:, None]
    out = np.argmax(close, axis=1)
    for i in np.nonzero(close.sum(1) > 1)[0]:
        cand = np.nonzero(close[i])[0]
        exact = ((c[cand] - x[i]) ** 2).sum(1)
        out[i] = cand[np.argmin(exact)]
    return out.astype(np.int64)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((x - x[idx[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            j = int(rng.integers(n))
        else:
            j = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            j = min(j, n - 1)
        idx.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(1))
    return x[idx].copy()


def _inertia(x, c, assign) -> float:
    return float(((x - c[assign]) ** 2).sum())


def kmeans_fit(data, k: int, iters: int = 100, seed: int = 0) -> KMeansCodebook:
    """k-means++ seeding followed by Lloyd iterations.

    Stops early once assignments no longer change. An empty cluster is
    re-seeded with the point farthest from its current centroid.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"data must be N x D, got shape {x.shape}")
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValidationError(f"k-means needs N >= k >= 1, got N={n}, k={k}")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    assign = nearest(x, c)
    trace = [_inertia(x, c, assign)]
    it = 0
    for it in range(1, iters + 1):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.nonzero(~nonempty)[0]:
            far = int(np.argmax(((x - c[assign]) ** 2).sum(1)))
            c[j] = x[far]
            assign[far] = j
        new_assign = nearest(x, c)
        trace.append(_inertia(x, c, new_assign))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansCodebook(c, it, trace[-1], trace)


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, ContentFeatures):
        return features.frames
    return np.asarray(features, dtype=np.float64)


def kmeans_quantize(features, cb: KMeansCodebook, mode=Mode.TENSOR):
    x = _as_matrix(features)
    if x.shape[1] != cb.dim:
        raise ValidationError(f"feature dim {x.shape[1]} does not match codebook dim {cb.dim}")
    codes = nearest(x, cb.centroids)
    if Mode.parse(mode) is Mode.CODES:
        return codes
    return ContentFeatures(cb.centroids[codes])


# --- residual VQ -----------------------------------------------------------

@dataclass
class ResidualCodebooks:
    stages: List[np.ndarray]
    residual_energy: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("RVQ needs at least one stage")
        dims = {s.shape[1] for s in self.stages}
        if len(dims) != 1:
            raise ValidationError(f"RVQ stages disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.stages[0].shape[1]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def truncated(self, n_stages: int) -> "ResidualCodebooks":
        return ResidualCodebooks(self.stages[:n_stages])


def rvq_fit(data, stages: int, codes_per_stage: int, iters: int = 100, seed: int = 0) -> ResidualCodebooks:
    """Fit each stage by k-means on the residual left by the previous stages.

    From the second stage on, the last codeword is pinned to zero and the
    other ``C - 1`` come from k-means, so a stage can always leave a frame's
    residual untouched and per-frame error never grows with depth.
    """
    residual = np.array(data, dtype=np.float64)
    if residual.ndim != 2 or residual.shape[0] < codes_per_stage:
        raise ValidationError(f"RVQ needs N >= codes_per_stage, got data {residual.shape}, C={codes_per_stage}")
    books, energy = [], []
    for s in range(stages):
        if s == 0 or codes_per_stage == 1:
            book = kmeans_fit(residual, codes_per_stage, iters, seed).centroids
        else:
            book = kmeans_fit(residual, codes_per_stage - 1, iters, seed).centroids
            book = np.vstack([book, np.zeros((1, residual.shape[1]))])
        residual = residual - book[nearest(residual, book)]
        books.append(book)
        energy.append(float((residual ** 2).sum(1).mean()))
    return ResidualCodebooks(books, energy)


def rvq_encode(features, rvq: ResidualCodebooks, mode=Mode.TENSOR):
    """Greedy stage-wise encoding; codes come back as an ``S x T`` array."""
    x = _as_matrix(features)
    if x.shape[1] != rvq.dim:
        raise ValidationError(f"feature dim {x.shape[1]} does not match RVQ dim {rvq.dim}")
    residual = x.copy()
    recon = np.zeros_like(x)
    codes = []
    for book in rvq.stages:
        idx = nearest(residual, book)
        recon += book[idx]
        residual -= book[idx]
        codes.append(idx)
    if Mode.parse(mode) is Mode.CODES:
        return np.stack(codes)
    return ContentFeatures(recon)
