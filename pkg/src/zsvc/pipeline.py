"""Clip-level entry points: content preparation, the model stages on domain types, and conversion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .audio_io import AudioClip
from .content import (ContentFeatures, ContentProvider, KMeansCodebook, Mode, ResidualCodebooks,
                      kmeans_quantize, rvq_encode)
from .dsp import F0Track, MelSpectrogram, SpectroConfig, estimate_f0, f0_to_bins, log_mel
from .errors import ValidationError
from .model import DiscriminatorBank, GaussianStats, LatentSample, SvcModel, reparam_sample
from .speaker import (EmbeddingStore, SpeakerEmbedding, SpeakerEncoder, encode_speaker, mel_tensor,
                      retrieval_average)


@dataclass
class ContentPipeline:
    """Provider plus optional k-means / RVQ compression.

    :meth:`prepare` returns ``D x T`` floats (tensor mode) or ``S x T`` codes.
    """

    provider: ContentProvider = ContentProvider()
    compression: str = "none"
    mode: Mode = Mode.TENSOR
    codebook: Union[KMeansCodebook, ResidualCodebooks, None] = None

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.compression not in ("none", "kmeans", "rvq"):
            raise ValidationError(f"unknown compression {self.compression!r}")
        if self.compression != "none" and self.codebook is None:
            raise ValidationError(f"{self.compression} compression needs a fitted codebook")

    def raw(self, mel: MelSpectrogram, name: Optional[str] = None) -> ContentFeatures:
        return self.provider.features(mel, name)

    def compress(self, feats: ContentFeatures) -> np.ndarray:
        if self.compression == "none":
            return feats.frames.T
        if self.compression == "kmeans":
            out = kmeans_quantize(feats, self.codebook, self.mode)
            return out[None] if self.mode is Mode.CODES else out.frames.T
        out = rvq_encode(feats, self.codebook, self.mode)
        return out if self.mode is Mode.CODES else out.frames.T

    def prepare(self, mel: MelSpectrogram, name: Optional[str] = None) -> np.ndarray:
        return self.compress(self.raw(mel, name))


def content_tensor(content: np.ndarray) -> torch.Tensor:
    if np.issubdtype(content.dtype, np.integer):
        return torch.as_tensor(content, dtype=torch.int64)[None]
    return torch.as_tensor(content, dtype=torch.get_default_dtype())[None]


def _spk(model: SvcModel, speaker: SpeakerEmbedding) -> torch.Tensor:
    return torch.as_tensor(speaker.vector, dtype=model.decoder.post.weight.dtype)[None]


def encode_posterior(mel: MelSpectrogram, speaker: SpeakerEmbedding, model: SvcModel) -> GaussianStats:
    if mel.frames.shape[1] != model.cfg.n_mels:
        raise ValidationError(f"mel has {mel.frames.shape[1]} bands, model expects {model.cfg.n_mels}")
    with torch.no_grad():
        return model.encode_posterior(mel_tensor(mel).to(model.decoder.post.weight.dtype), _spk(model, speaker))


def encode_prior(content: np.ndarray, pitch_bins: np.ndarray, model: SvcModel) -> GaussianStats:
    """``content``: ``D x T`` floats or ``S x T`` codes; lengths truncated to the shorter stream."""
    t = min(content.shape[1], len(pitch_bins))
    with torch.no_grad():
        c = content_tensor(np.asarray(content)[:, :t])
        if c.is_floating_point():
            c = c.to(model.decoder.post.weight.dtype)
        return model.encode_prior(c, torch.as_tensor(np.asarray(pitch_bins)[:t], dtype=torch.int64)[None])


def decode(z: LatentSample, speaker: SpeakerEmbedding, model: SvcModel, sample_rate: int = 32000) -> AudioClip:
    with torch.no_grad():
        wave = model.decode(z, _spk(model, speaker))[0]
    return AudioClip(wave.double().numpy(), sample_rate)


def discriminate(wave, bank: DiscriminatorBank):
    x = wave.samples if isinstance(wave, AudioClip) else wave
    x = torch.as_tensor(np.asarray(x), dtype=next(bank.parameters()).dtype)
    with torch.no_grad():
        return bank(x[None] if x.dim() == 1 else x)


@dataclass(frozen=True)
class ConvertOptions:
    retrieval: bool = False
    k: int = 3
    temperature: float = 0.8
    transpose_semitones: float = 0.0
    seed: int = 0
    f0_min: float = 50.0
    f0_max: float = 1100.0


def target_embedding(reference: AudioClip, enc: SpeakerEncoder, cfg: SpectroConfig,
                     store: Optional[EmbeddingStore] = None, opts: ConvertOptions = ConvertOptions()):
    emb = encode_speaker(log_mel(reference, cfg), enc)
    if opts.retrieval:
        if store is None:
            raise ValidationError("retrieval mode needs an embedding store")
        emb = retrieval_average(emb, store, opts.k)
    return emb


def convert(source: AudioClip, reference: AudioClip, model: SvcModel, enc: SpeakerEncoder,
            content: ContentPipeline, opts: ConvertOptions = ConvertOptions(),
            store: Optional[EmbeddingStore] = None, cfg: SpectroConfig = SpectroConfig()) -> AudioClip:
    """Source content and pitch, reference timbre; output has ``hop * T(source)`` samples."""
    if len(source) == 0 or len(reference) == 0:
        raise ValidationError("source and reference clips must be non-empty")
    for clip, what in ((source, "source"), (reference, "reference")):
        if clip.sample_rate != cfg.sample_rate:
            raise ValidationError(f"{what} rate {clip.sample_rate} Hz, model runs at {cfg.sample_rate} Hz")
    mel = log_mel(source, cfg)
    feats = content.prepare(mel)
    track: F0Track = estimate_f0(source, opts.f0_min, opts.f0_max, cfg)
    if opts.transpose_semitones:
        track = track.transposed(opts.transpose_semitones)
    bins = f0_to_bins(track, model.cfg.pitch_bins)
    speaker = target_embedding(reference, enc, cfg, store, opts)
    prior = encode_prior(feats, bins, model)
    z_p = reparam_sample(prior, int(opts.seed), opts.temperature, "z_p")
    with torch.no_grad():
        z_t = model.flow_forward(z_p, _spk(model, speaker))
    return decode(z_t, speaker, model, cfg.sample_rate)
