"""Training objectives: reconstruction, KL, multi-resolution STFT, adversarial and feature-map terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import LossWeights
from .dsp import LOG_FLOOR, SpectroConfig, mel_filterbank, padded_window
from .errors import ValidationError
from .model import Flow, GaussianStats, LatentSample, reparam_sample

STFT_RESOLUTIONS = ((512, 128), (1024, 256), (2048, 512))
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

COMPONENTS = ("l_wav", "l_mel", "l_kl", "l_adv", "l_fmap", "l_stft")


@dataclass
class LossBreakdown:
    l_wav: float = 0.0
    l_mel: float = 0.0
    l_kl: float = 0.0
    l_adv: float = 0.0
    l_fmap: float = 0.0
    l_stft: float = 0.0
    l_gen: float = 0.0
    l_dis: float = 0.0

    def as_dict(self):
        return asdict(self)


def _same_shape(name, a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_l2(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    d = real - fake
    return d.abs().mean() + (d * d).mean()


def l_wav(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    if real.shape[-1] != fake.shape[-1]:
        raise ValidationError(f"l_wav: length mismatch {real.shape[-1]} vs {fake.shape[-1]}")
    _same_shape("l_wav", real, fake)
    return l1_l2(real, fake)


def l_mel(real_mel: torch.Tensor, fake_mel: torch.Tensor) -> torch.Tensor:
    _same_shape("l_mel", real_mel, fake_mel)
    return l1_l2(real_mel, fake_mel)


class LogMel(nn.Module):
    """Differentiable twin of :func:`zsvc.dsp.log_mel`; input ``B x N``, output ``B x n_mels x T``."""

    def __init__(self, cfg: SpectroConfig = SpectroConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("window", torch.as_tensor(padded_window(cfg)), persistent=False)
        self.register_buffer("fb", torch.as_tensor(mel_filterbank(cfg)), persistent=False)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        dtype = wave.dtype
        spec = torch.stft(wave, cfg.n_fft, cfg.hop, cfg.n_fft, self.window.to(dtype), center=True,
                          pad_mode="reflect", return_complex=True)
        mag = torch.sqrt((spec.real ** 2 + spec.imag ** 2).clamp_min(1e-18))
        return torch.log(torch.clamp(self.fb.to(dtype) @ mag, min=LOG_FLOOR))


def gaussian_kl(stats1: GaussianStats, stats2: GaussianStats) -> torch.Tensor:
    """Element-mean KL(N1 || N2) for diagonal Gaussians."""
    _same_shape("gaussian_kl", stats1.mu, stats2.mu)
    var1 = torch.exp(2.0 * stats1.log_sigma)
    var2 = torch.exp(2.0 * stats2.log_sigma)
    kl = stats2.log_sigma - stats1.log_sigma + (var1 + (stats1.mu - stats2.mu) ** 2) / (2.0 * var2) - 0.5
    return kl.mean()


def gaussian_nll(z: torch.Tensor, stats: GaussianStats) -> torch.Tensor:
    """Diagonal-Gaussian negative log-density, averaged per element."""
    _same_shape("gaussian_nll", z, stats.mu)
    u = (z - stats.mu) * torch.exp(-stats.log_sigma)
    return (stats.log_sigma + _HALF_LOG_2PI + 0.5 * u * u).mean()


def _per_element(log_det, z: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(log_det):
        return torch.tensor(float(log_det), dtype=z.dtype)
    return log_det.mean() / (z.shape[1] * z.shape[2])


def l_kl(posterior: GaussianStats, prior: GaussianStats, flow: Flow, g: torch.Tensor,
         noise_q: torch.Tensor, noise_p: torch.Tensor) -> torch.Tensor:
    """Single-sample change-of-variables KL estimates in both flow directions, summed.

    term_q pairs the posterior sample z_q with its inverse image z_f under the prior;
    term_p pairs the prior sample z_p with its forward image z_t under the posterior.
    """
    _same_shape("l_kl", posterior.mu, prior.mu)
    z_q = reparam_sample(posterior, noise_q, 1.0, "z_q")
    z_f, ld_inv = flow.inverse(z_q.z, g)
    term_q = gaussian_nll(z_f, prior) - gaussian_nll(z_q.z, posterior) - _per_element(ld_inv, z_q.z)
    z_p = reparam_sample(prior, noise_p, 1.0, "z_p")
    z_t, ld_fwd = flow(z_p.z, g)
    term_p = gaussian_nll(z_t, posterior) - gaussian_nll(z_p.z, prior) - _per_element(ld_fwd, z_p.z)
    return term_q + term_p


def stft_magnitude(wave: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
    window = torch.hann_window(n_fft, periodic=True, dtype=wave.dtype)
    spec = torch.stft(wave, n_fft, hop, n_fft, window, center=True, pad_mode="constant", return_complex=True)
    return torch.sqrt((spec.real ** 2 + spec.imag ** 2).clamp_min(LOG_FLOOR ** 2))


def l_stft(real: torch.Tensor, fake: torch.Tensor, resolutions=STFT_RESOLUTIONS) -> torch.Tensor:
    """Multi-resolution spectral convergence plus log-magnitude L1 (magnitudes floored at 1e-5)."""
    if real.shape[-1] != fake.shape[-1]:
        raise ValidationError(f"l_stft: length mismatch {real.shape[-1]} vs {fake.shape[-1]}")
    if not torch.any(real != 0):
        raise ValidationError("l_stft: spectral convergence is undefined for an all-zero real signal")
    total = real.new_zeros(())
    for n_fft, hop in resolutions:
        mr = stft_magnitude(real, n_fft, hop)
        mf = stft_magnitude(fake, n_fft, hop)
        sc = torch.linalg.vector_norm(mr - mf) / torch.linalg.vector_norm(mr)
        total = total + sc + (torch.log(mr) - torch.log(mf)).abs().mean()
    return total


def _check_lists(name, a: Sequence, b: Sequence):
    if len(a) != len(b):
        raise ValidationError(f"{name}: {len(a)} vs {len(b)} sub-discriminators")


def l_dis(real_scores, fake_scores, orientation: str = "lsgan") -> torch.Tensor:
    """Least-squares discriminator loss, averaged over sub-discriminators.

    ``lsgan`` pushes D(real) to 1 and D(fake) to 0; ``printed`` swaps the targets.
    """
    _check_lists("l_dis", real_scores, fake_scores)
    if not real_scores:
        raise ValidationError("l_dis: no score maps")
    terms = []
    for r, f in zip(real_scores, fake_scores):
        if orientation == "lsgan":
            terms.append(((1.0 - r) ** 2).mean() + (f ** 2).mean())
        elif orientation == "printed":
            terms.append((r ** 2).mean() + ((1.0 - f) ** 2).mean())
        else:
            raise ValidationError(f"unknown discriminator orientation {orientation!r}")
    return torch.stack(terms).mean()


def l_adv(fake_scores) -> torch.Tensor:
    if not fake_scores or any(f.numel() == 0 for f in fake_scores):
        raise ValidationError("l_adv: empty score maps")
    return torch.stack([((1.0 - f) ** 2).mean() for f in fake_scores]).mean()


def l_fmap(real_fmaps, fake_fmaps) -> torch.Tensor:
    _check_lists("l_fmap", real_fmaps, fake_fmaps)
    total = None
    for rs, fs in zip(real_fmaps, fake_fmaps):
        _check_lists("l_fmap layers", rs, fs)
        for r, f in zip(rs, fs):
            _same_shape("l_fmap", r, f)
            term = (r.detach() - f).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise ValidationError("l_fmap: no feature maps")
    return total


def l_gen(parts, w: LossWeights = LossWeights()):
    """alpha*(wav + mel) + beta*kl + w_adv*adv + w_fmap*fmap + gamma*stft.

    ``parts`` is a :class:`LossBreakdown` or a mapping of component tensors.
    """
    get = (lambda k: parts[k]) if isinstance(parts, dict) else (lambda k: getattr(parts, k))
    for name in COMPONENTS:
        v = get(name)
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not np.isfinite(v):
            raise ValidationError(f"l_gen: non-finite component {name}")
    return (w.alpha * (get("l_wav") + get("l_mel")) + w.beta * get("l_kl") + w.w_adv * get("l_adv")
            + w.w_fmap * get("l_fmap") + w.gamma * get("l_stft"))
