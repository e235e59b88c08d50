"""Timbre pathway: a pooling speaker encoder, the embedding store, and retrieval averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .audio_io import AudioClip
from .content import load_matrix, save_matrix
from .dsp import MelSpectrogram, SpectroConfig, log_mel
from .errors import FormatError, ValidationError

SPEAKER_DIM = 256


_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValidationError("speaker embedding must be finite")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > _UNIT_TOL:
            raise ValidationError(f"speaker embedding must be unit-norm, got norm {norm:.8f}")
        object.__setattr__(self, "vector", v)

    @classmethod
    def normalized(cls, v) -> "SpeakerEmbedding":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(v)
        if not norm > 0:
            raise ValidationError("cannot normalize a zero vector")
        if abs(norm - 1.0) <= _UNIT_TOL and np.array_equal(v, v.astype(np.float32)):
            return cls(v)  # already a valid embedding: normalizing is a no-op
        # float32-representable so store files and model inputs are exact copies
        return cls((v / norm).astype(np.float32).astype(np.float64))

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.vector, dtype=torch.get_default_dtype())


class SpeakerEncoder(nn.Module):
    """Mean+std pooling over time per mel band, then a two-layer projection.

    ``frozen`` keeps the seeded initialization: the trainer leaves these
    parameters out of the optimizer.
    """

    def __init__(self, n_mels: int = 80, dim: int = SPEAKER_DIM, hidden: int = 256, frozen: bool = False):
        super().__init__()
        self.n_mels = n_mels
        self.proj_in = nn.Linear(2 * n_mels, hidden)
        self.proj_out = nn.Linear(hidden, dim)
        self.frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        for p in self.parameters():
            p.requires_grad_(not self._frozen)

    @property
    def dim(self) -> int:
        return self.proj_out.out_features

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """``mel``: ``B x n_mels x T`` log-mel; returns ``B x dim`` unit vectors."""
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ValidationError(f"speaker encoder expects B x {self.n_mels} x T, got {tuple(mel.shape)}")
        if mel.shape[2] < 2:
            raise ValidationError("speaker encoder needs at least 2 frames")
        mean = mel.mean(dim=2)
        std = torch.sqrt(((mel - mean[:, :, None]) ** 2).mean(dim=2) + 1e-8)
        h = torch.tanh(self.proj_in(torch.cat([mean, std], dim=1)))
        e = self.proj_out(h)
        return e / torch.linalg.vector_norm(e, dim=1, keepdim=True).clamp_min(1e-12)


def mel_tensor(mel: MelSpectrogram) -> torch.Tensor:
    return torch.as_tensor(mel.frames.T[None], dtype=torch.get_default_dtype())


def encode_speaker(mel: MelSpectrogram, enc: SpeakerEncoder) -> SpeakerEmbedding:
    if mel.frames.shape[0] < 2:
        raise ValidationError(f"need at least 2 mel frames, got {mel.frames.shape[0]}")
    if mel.frames.shape[1] != enc.n_mels:
        raise ValidationError(f"mel has {mel.frames.shape[1]} bands, encoder expects {enc.n_mels}")
    with torch.no_grad():
        dtype = enc.proj_in.weight.dtype
        e = enc(torch.as_tensor(mel.frames.T[None], dtype=dtype))[0]
    return SpeakerEmbedding.normalized(e.double().numpy())


@dataclass
class EmbeddingStore:
    ids: List[str] = field(default_factory=list)
    matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("speaker ids must be unique")
        if len(self.ids) and self.matrix.shape[0] != len(self.ids):
            raise ValidationError(f"{len(self.ids)} ids for {self.matrix.shape[0]} embeddings")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_embeddings(cls, items: Sequence[Tuple[str, SpeakerEmbedding]]) -> "EmbeddingStore":
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate speaker ids: {dup}")
        if not items:
            return cls()
        return cls(ids, np.stack([e.vector for _, e in items]))

    def embedding(self, i: int) -> SpeakerEmbedding:
        return SpeakerEmbedding(self.matrix[i])

    def save(self, stem) -> None:
        stem = Path(stem)
        save_matrix(self.matrix.reshape(len(self), -1), stem.with_suffix(".svcf"))
        stem.with_suffix(".ids").write_text("".join(f"{i}\n" for i in self.ids), encoding="utf-8")

    @classmethod
    def load(cls, stem) -> "EmbeddingStore":
        stem = Path(stem)
        matrix = load_matrix(stem.with_suffix(".svcf")).astype(np.float64)
        ids = stem.with_suffix(".ids").read_text(encoding="utf-8").splitlines()
        if len(ids) != matrix.shape[0]:
            raise FormatError(f"{len(ids)} ids for {matrix.shape[0]} stored embeddings")
        for row in matrix:
            SpeakerEmbedding(row)
        return cls(ids, matrix)


def build_store(items: Sequence[Tuple[str, AudioClip]], enc: SpeakerEncoder,
                cfg: SpectroConfig = SpectroConfig()) -> EmbeddingStore:
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate speaker ids: {sorted({i for i in ids if ids.count(i) > 1})}")
    return EmbeddingStore.from_embeddings([(i, encode_speaker(log_mel(clip, cfg), enc)) for i, clip in items])


def top_k(store: EmbeddingStore, query: SpeakerEmbedding, k: int) -> List[Tuple[str, float]]:
    """Highest cosine similarities first; equal scores keep insertion order."""
    if len(store) == 0:
        raise ValidationError("embedding store is empty")
    if store.matrix.shape[1] != query.dim:
        raise ValidationError(f"query dim {query.dim} does not match store dim {store.matrix.shape[1]}")
    sims = store.matrix @ query.vector
    order = np.argsort(-sims, kind="stable")[:k]
    return [(store.ids[i], float(sims[i])) for i in order]


def retrieval_average(query: SpeakerEmbedding, store: EmbeddingStore, k: int = 3) -> SpeakerEmbedding:
    """Equal-weight mean of the query and its top-k neighbours, renormalized."""
    hits = top_k(store, query, k)
    index = {sid: i for i, sid in enumerate(store.ids)}
    vecs = [query.vector] + [store.matrix[index[sid]] for sid, _ in hits]
    mean = np.mean(vecs, axis=0)
    if np.linalg.norm(mean) < 1e-12:
        raise ValidationError("retrieval average cancelled to a zero vector")
    return SpeakerEmbedding.normalized(mean)
