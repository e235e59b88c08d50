"""Adversarial training loop, synthetic corpus, and resumable SVCK checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .audio_io import AudioClip
from .checkpoint import decode_int, decode_text, encode_int, encode_text, load_tensors, save_tensors
from .config import TrainConfig, format_config, parse_config
from .content import ContentProvider, KMeansCodebook, Mode, ResidualCodebooks, kmeans_fit, rvq_fit
from .dsp import estimate_f0, f0_to_bins, log_mel
from .errors import FormatError, NumericalError, ValidationError
from .losses import (LogMel, LossBreakdown, l_adv, l_dis, l_fmap, l_gen, l_kl, l_mel, l_stft, l_wav)
from .model import DiscriminatorBank, SvcModel, build_models, reparam_sample
from .nn import set_deterministic
from .pipeline import ContentPipeline

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "l_gen", "l_dis", "l_wav", "l_mel", "l_kl", "l_adv", "l_fmap", "l_stft")


# --- synthetic corpus ------------------------------------------------------

@dataclass
class Utterance:
    name: str
    speaker: str
    clip: AudioClip


def _formant_gain(freqs, formants, bandwidths):
    gain = np.zeros_like(freqs)
    for f, b in zip(formants, bandwidths):
        gain += 1.0 / (1.0 + ((freqs - f) / b) ** 2)
    return gain


def synth_clip(rng: np.random.Generator, formants, base_f0: float, seconds: float, sr: int) -> np.ndarray:
    """Sung-note stand-in: a short melody of harmonic tones shaped by speaker formants plus breath noise."""
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    n_notes = int(rng.integers(2, 5))
    bounds = np.sort(rng.choice(np.arange(1, 20), n_notes - 1, replace=False)) / 20.0 * n
    semis = rng.integers(-5, 8, n_notes)
    f0 = np.empty(n)
    edges = np.concatenate([[0], bounds.astype(int), [n]])
    for i in range(n_notes):
        f0[edges[i]:edges[i + 1]] = base_f0 * 2.0 ** (semis[i] / 12.0)
    f0 *= 1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    bandwidths = [80.0 + 0.05 * f for f in formants]
    out = np.zeros(n)
    for h in range(1, 40):
        fh = h * f0
        amp = _formant_gain(fh, formants, bandwidths) / h ** 0.7
        amp[fh >= sr / 2 - 500] = 0.0
        out += amp * np.sin(h * phase)
    noise = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    breath = np.fft.irfft(noise * _formant_gain(freqs, formants, bandwidths), n)
    out = out / (np.abs(out).max() + 1e-9) + 0.05 * breath / (np.abs(breath).max() + 1e-9)
    env = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.02)
    return 0.5 * env * out / (np.abs(out).max() + 1e-9)


def synthetic_dataset(n_speakers: int = 4, clips_per_speaker: int = 4, seconds: float = 1.0,
                      seed: int = 0, sample_rate: int = 32000) -> List[Utterance]:
    rng = np.random.default_rng(seed)
    items = []
    for s in range(n_speakers):
        formants = np.sort(rng.uniform([300, 900, 2200], [900, 2200, 3800]))
        base_f0 = float(rng.uniform(110.0, 440.0))
        for c in range(clips_per_speaker):
            wave = synth_clip(rng, formants, base_f0, seconds, sample_rate)
            items.append(Utterance(f"spk{s:02d}_{c:02d}", f"spk{s:02d}", AudioClip(wave, sample_rate)))
    return items


# --- batches ---------------------------------------------------------------

@dataclass
class PreparedClip:
    name: str
    wave: np.ndarray
    mel: np.ndarray  # n_mels x T
    content: np.ndarray  # D x T floats or S x T codes
    pitch: np.ndarray  # T


@dataclass
class Batch:
    mel: torch.Tensor  # B x n_mels x T
    content: torch.Tensor  # B x D x T or B x S x T
    pitch: torch.Tensor  # B x T
    wave: torch.Tensor  # B x hop*T
    speaker_mel: torch.Tensor  # B x n_mels x T_full
    noise_q: torch.Tensor
    noise_p: torch.Tensor


def prepare_clips(dataset: Sequence[Utterance], pipeline: ContentPipeline, cfg: TrainConfig) -> List[PreparedClip]:
    out = []
    for u in dataset:
        if u.clip.sample_rate != cfg.spectro.sample_rate:
            raise ValidationError(f"clip {u.name!r} is {u.clip.sample_rate} Hz, config wants {cfg.spectro.sample_rate}")
        mel = log_mel(u.clip, cfg.spectro)
        content = pipeline.prepare(mel, u.name)
        pitch = f0_to_bins(estimate_f0(u.clip, cfg.f0_min, cfg.f0_max, cfg.spectro), cfg.model.pitch_bins)
        t = min(mel.n_frames, content.shape[1], len(pitch))
        out.append(PreparedClip(u.name, u.clip.samples, mel.frames[:t].T, content[:, :t], pitch[:t]))
    return out


def make_batch(clips: Sequence[PreparedClip], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Uniformly drawn clips, random aligned segments of ``segment_frames`` frames."""
    seg, hop = cfg.segment_frames, cfg.spectro.hop
    if not clips:
        raise ValidationError("dataset is empty")
    for c in clips:
        if len(c.wave) < seg * hop:
            raise ValidationError(f"clip {c.name!r} has {len(c.wave)} samples, segment needs {seg * hop}")
    dtype = torch.get_default_dtype()
    picks = rng.integers(len(clips), size=cfg.batch_size)
    mels, contents, pitches, waves, spk = [], [], [], [], []
    for i in picks:
        c = clips[i]
        start = int(rng.integers(len(c.wave) // hop - seg + 1))
        mels.append(c.mel[:, start:start + seg])
        contents.append(c.content[:, start:start + seg])
        pitches.append(c.pitch[start:start + seg])
        waves.append(c.wave[start * hop:(start + seg) * hop])
        spk.append(c.mel)
    width = min(m.shape[1] for m in spk)
    shape = (cfg.batch_size, cfg.model.d_z, seg)
    content = np.stack(contents)
    content_t = (torch.as_tensor(content, dtype=torch.int64) if np.issubdtype(content.dtype, np.integer)
                 else torch.as_tensor(content, dtype=dtype))
    return Batch(
        mel=torch.as_tensor(np.stack(mels), dtype=dtype),
        content=content_t,
        pitch=torch.as_tensor(np.stack(pitches), dtype=torch.int64),
        wave=torch.as_tensor(np.stack(waves), dtype=dtype),
        speaker_mel=torch.as_tensor(np.stack([m[:, :width] for m in spk]), dtype=dtype),
        noise_q=torch.as_tensor(rng.standard_normal(shape), dtype=dtype),
        noise_p=torch.as_tensor(rng.standard_normal(shape), dtype=dtype),
    )


# --- state -----------------------------------------------------------------

def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps, foreach=False)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: SvcModel
    disc: DiscriminatorBank
    pipeline: ContentPipeline
    step: int = 0
    opt_g: torch.optim.Optimizer = field(init=False)
    opt_d: torch.optim.Optimizer = field(init=False)

    def __post_init__(self):
        self.model.speaker.frozen = self.cfg.freeze_speaker
        self.opt_g = _adam(self.generator_parameters(), self.cfg)
        self.opt_d = _adam(list(self.disc.parameters()), self.cfg)
        self.mel_fn = LogMel(self.cfg.spectro)

    def generator_parameters(self):
        return [p for n, p in self.model.named_parameters()
                if not (self.cfg.freeze_speaker and n.startswith("speaker."))]

    def rng(self) -> np.random.Generator:
        """Per-step generator: the RNG state is fully determined by (seed, step)."""
        return np.random.default_rng([self.cfg.seed, self.step])


def new_state(cfg: TrainConfig, pipeline: ContentPipeline) -> TrainState:
    model, disc = build_models(cfg.resolved_model(), cfg.seed)
    return TrainState(cfg, model, disc, pipeline)


def fit_pipeline(dataset: Sequence[Utterance], cfg: TrainConfig) -> ContentPipeline:
    """Build the content pipeline, fitting k-means / RVQ codebooks on the training split."""
    provider = ContentProvider.parse(cfg.content_provider, cfg.content_seed, cfg.model.content_dim)
    feats = [provider.features(log_mel(u.clip, cfg.spectro), u.name) for u in dataset]
    if feats[0].dim != cfg.model.content_dim:
        raise ValidationError(f"content provider yields dim {feats[0].dim}, config content_dim is "
                              f"{cfg.model.content_dim}")
    data = np.concatenate([f.frames for f in feats], axis=0)
    codebook = None
    if cfg.compression == "kmeans":
        codebook = kmeans_fit(data, min(cfg.kmeans_k, data.shape[0]), cfg.codebook_iters, cfg.seed)
    elif cfg.compression == "rvq":
        codebook = rvq_fit(data, cfg.rvq_stages, min(cfg.rvq_codes, data.shape[0]), cfg.codebook_iters, cfg.seed)
    return ContentPipeline(provider, cfg.compression, Mode.parse(cfg.mode), codebook)


# --- one step --------------------------------------------------------------

def _check_finite(parts: Dict[str, torch.Tensor], step: int):
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise NumericalError(name, step)


def train_step(state: TrainState, batch: Batch) -> LossBreakdown:
    """Discriminator step on (real, detached fake), then generator step on the composite loss."""
    cfg = state.cfg
    model, disc = state.model, state.disc
    step = state.step + 1
    g = model.speaker(batch.speaker_mel)
    post = model.encode_posterior(batch.mel, g)
    z_q = reparam_sample(post, batch.noise_q, 1.0, "z_q")
    fake = model.decode(z_q, g)
    real = batch.wave

    state.opt_d.zero_grad(set_to_none=True)
    real_scores, _ = disc(real)
    fake_scores, _ = disc(fake.detach())
    loss_d = l_dis(real_scores, fake_scores, cfg.dis_orientation)
    _check_finite({"l_dis": loss_d}, step)
    loss_d.backward()
    state.opt_d.step()

    prior = model.encode_prior(batch.content, batch.pitch)
    fake_scores, fake_fmaps = disc(fake)
    with torch.no_grad():
        _, real_fmaps = disc(real)
    parts = {
        "l_wav": l_wav(real, fake),
        "l_mel": l_mel(state.mel_fn(real), state.mel_fn(fake)),
        "l_kl": l_kl(post, prior, model.flow, g, batch.noise_q, batch.noise_p),
        "l_adv": l_adv(fake_scores),
        "l_fmap": l_fmap(real_fmaps, fake_fmaps),
        "l_stft": l_stft(real, fake),
    }
    _check_finite(parts, step)
    loss_g = l_gen(parts, cfg.weights)
    _check_finite({"l_gen": loss_g}, step)
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()
    state.step = step
    values = {k: float(v.detach()) for k, v in parts.items()}
    return LossBreakdown(l_gen=float(loss_g.detach()), l_dis=float(loss_d.detach()), **values)


# --- checkpoints -----------------------------------------------------------

META = "__meta__"


def _optim_tensors(prefix: str, opt: torch.optim.Optimizer, names: Dict[int, str]):
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            base = f"{prefix}.{names[id(p)]}"
            out[f"{base}.step"] = encode_int(int(st["step"]))
            out[f"{base}.exp_avg"] = st["exp_avg"].detach().numpy()
            out[f"{base}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return out


def state_tensors(state: TrainState, optimizer: bool = True) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {
        f"{META}.config": encode_text(format_config(state.cfg)),
        f"{META}.step": encode_int(state.step),
        f"{META}.seed": encode_int(state.cfg.seed),
    }
    cb = state.pipeline.codebook
    if isinstance(cb, KMeansCodebook):
        out["__content__.kmeans"] = cb.centroids
    elif isinstance(cb, ResidualCodebooks):
        for i, stage in enumerate(cb.stages):
            out[f"__content__.rvq.{i}"] = stage
    for name, t in state.model.state_dict().items():
        out[f"gen.{name}"] = t.detach().numpy()
    for name, t in state.disc.state_dict().items():
        out[f"disc.{name}"] = t.detach().numpy()
    if optimizer:
        gnames = {id(p): f"gen.{n}" for n, p in state.model.named_parameters()}
        dnames = {id(p): f"disc.{n}" for n, p in state.disc.named_parameters()}
        out.update(_optim_tensors("__optim_g__", state.opt_g, gnames))
        out.update(_optim_tensors("__optim_d__", state.opt_d, dnames))
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    save_tensors(state_tensors(state), path)
    return path


def _require(tensors, name):
    if name not in tensors:
        raise FormatError("checkpoint is missing a required tensor", name=name)
    return tensors[name]


def _load_module(module: torch.nn.Module, tensors, prefix: str):
    sd = {}
    for name, ref in module.state_dict().items():
        arr = _require(tensors, f"{prefix}.{name}")
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"shape {arr.shape} does not match model shape {tuple(ref.shape)}",
                              name=f"{prefix}.{name}")
        sd[name] = torch.as_tensor(arr, dtype=ref.dtype)
    module.load_state_dict(sd)


def _load_optim(opt, tensors, prefix, names):
    for group in opt.param_groups:
        for p in group["params"]:
            base = f"{prefix}.{names[id(p)]}"
            if f"{base}.step" not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(decode_int(tensors[f"{base}.step"]))),
                "exp_avg": torch.as_tensor(_require(tensors, f"{base}.exp_avg")).clone(),
                "exp_avg_sq": torch.as_tensor(_require(tensors, f"{base}.exp_avg_sq")).clone(),
            }


def state_from_tensors(tensors: Dict[str, np.ndarray]) -> TrainState:
    cfg = parse_config(decode_text(_require(tensors, f"{META}.config")))
    provider = ContentProvider.parse(cfg.content_provider, cfg.content_seed, cfg.model.content_dim)
    codebook = None
    if cfg.compression == "kmeans":
        codebook = KMeansCodebook(_require(tensors, "__content__.kmeans").astype(np.float64))
    elif cfg.compression == "rvq":
        codebook = ResidualCodebooks([_require(tensors, f"__content__.rvq.{i}").astype(np.float64)
                                      for i in range(cfg.rvq_stages)])
    pipeline = ContentPipeline(provider, cfg.compression, Mode.parse(cfg.mode), codebook)
    state = new_state(cfg, pipeline)
    _load_module(state.model, tensors, "gen")
    _load_module(state.disc, tensors, "disc")
    state.step = decode_int(_require(tensors, f"{META}.step"))
    _load_optim(state.opt_g, tensors, "__optim_g__", {id(p): f"gen.{n}" for n, p in state.model.named_parameters()})
    _load_optim(state.opt_d, tensors, "__optim_d__", {id(p): f"disc.{n}" for n, p in state.disc.named_parameters()})
    return state


def load_checkpoint(path) -> TrainState:
    return state_from_tensors(load_tensors(path))


# --- loop ------------------------------------------------------------------

def train(dataset: Sequence[Utterance], cfg: TrainConfig, out_dir, resume: Optional[str] = None,
          log_every: int = 50) -> Path:
    """Run (or resume) training to ``cfg.steps``; returns the final checkpoint path.

    Writes ``train_log.csv`` (one row per step) and ``final.svck`` into
    ``out_dir``, plus ``step_XXXXXX.svck`` every ``checkpoint_interval`` steps.
    """
    set_deterministic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not dataset:
        raise ValidationError("dataset is empty")
    if resume is not None:
        state = load_checkpoint(resume)
        stored = replace(state.cfg, steps=cfg.steps)
        if format_config(stored) != format_config(cfg):
            log.warning("resuming with the checkpoint's stored config (only steps is taken from the new one)")
        cfg = state.cfg = stored
        pipeline = state.pipeline
    else:
        pipeline = fit_pipeline(dataset, cfg)
        state = new_state(cfg, pipeline)
    clips = prepare_clips(dataset, pipeline, cfg)
    log_path = out / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        if mode == "w":
            fh.write(",".join(LOG_FIELDS) + "\n")
        while state.step < cfg.steps:
            batch = make_batch(clips, cfg, state.rng())
            parts = train_step(state, batch)
            row = [state.step] + [getattr(parts, k) for k in LOG_FIELDS[1:]]
            fh.write(",".join([str(row[0])] + [f"{v:.6g}" for v in row[1:]]) + "\n")
            if log_every and state.step % log_every == 0:
                log.info("step %d l_gen=%.4f l_dis=%.4f l_mel=%.4f", state.step, parts.l_gen, parts.l_dis,
                         parts.l_mel)
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(state, out / f"step_{state.step:06d}.svck")
    return save_checkpoint(state, out / "final.svck")
