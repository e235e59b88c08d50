"""Generative stack: posterior/prior encoders, speaker-conditioned flow, decoder, discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ValidationError
from .nn import ChannelLayerNorm, leaky_relu
from .speaker import SpeakerEncoder

LOG_SIGMA_MIN = -9.0
LOG_SIGMA_MAX = 4.0
FLOW_SCALE_BOUND = 2.0
MIN_DISC_LENGTH = 30
RESIDUAL_INIT_SCALE = 0.5
OUTPUT_INIT_SCALE = 0.5

ROLES = ("z_q", "z_p", "z_t", "z_f")


@dataclass
class GaussianStats:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValidationError(f"mu {tuple(self.mu.shape)} and log_sigma {tuple(self.log_sigma.shape)} differ")
        self.log_sigma = self.log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    @classmethod
    def from_projection(cls, h: torch.Tensor) -> "GaussianStats":
        mu, log_sigma = torch.chunk(h, 2, dim=1)
        return cls(mu, log_sigma)

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class LatentSample:
    z: torch.Tensor
    role: str
    log_det: torch.Tensor | float = 0.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown latent role {self.role!r}")


def reparam_sample(stats: GaussianStats, noise, temperature: float = 1.0, role: str = "z_q") -> LatentSample:
    """``z = mu + temperature * exp(log_sigma) * noise``; ``noise`` may be a tensor or an integer seed."""
    if isinstance(noise, (int, np.integer)):
        rng = np.random.default_rng(int(noise))
        noise = torch.as_tensor(rng.standard_normal(tuple(stats.mu.shape)), dtype=stats.mu.dtype)
    if noise.shape != stats.mu.shape:
        raise ValidationError(f"noise shape {tuple(noise.shape)} does not match stats {tuple(stats.mu.shape)}")
    return LatentSample(stats.mu + temperature * torch.exp(stats.log_sigma) * noise, role)


def _pad(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


class ResidualConvStack(nn.Module):
    """Dilated residual conv layers with an optional global condition added at every layer."""

    def __init__(self, channels: int, kernel: int, layers: int, cond_dim: int = 0, dilation_growth: int = 2):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(layers):
            d = dilation_growth ** i
            self.convs.append(nn.Conv1d(channels, channels, kernel, padding=_pad(kernel, d), dilation=d))
            self.norms.append(ChannelLayerNorm(channels))
        self.cond = nn.Linear(cond_dim, channels * layers) if cond_dim else None

    def forward(self, x: torch.Tensor, g: Optional[torch.Tensor] = None) -> torch.Tensor:
        conds = None
        if self.cond is not None and g is not None:
            conds = torch.chunk(self.cond(g)[:, :, None], len(self.convs), dim=1)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = conv(leaky_relu(norm(x)))
            if conds is not None:
                h = h + conds[i]
            x = x + h
        return x


class PosteriorEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_mels = cfg.n_mels
        self.pre = nn.Conv1d(cfg.n_mels, cfg.hidden, 1)
        self.stack = ResidualConvStack(cfg.hidden, 5, 4, cfg.speaker_dim)
        self.proj = nn.Conv1d(cfg.hidden, 2 * cfg.d_z, 1)

    def forward(self, mel: torch.Tensor, g: torch.Tensor) -> GaussianStats:
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ValidationError(f"posterior encoder expects B x {self.n_mels} x T mel, got {tuple(mel.shape)}")
        return GaussianStats.from_projection(self.proj(self.stack(self.pre(mel), g)))


class PriorEncoder(nn.Module):
    """Content (continuous vectors or code indices) plus pitch-bin embedding to latent stats."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.codes = cfg.content_mode == "codes"
        if self.codes:
            self.code_tables = nn.ModuleList(nn.Embedding(cfg.n_codes, cfg.hidden) for _ in range(cfg.code_stages))
        else:
            self.content_in = nn.Conv1d(cfg.content_dim, cfg.hidden, 1)
        self.pitch_table = nn.Embedding(cfg.pitch_bins, cfg.pitch_embed)
        self.pitch_in = nn.Conv1d(cfg.pitch_embed, cfg.hidden, 1)
        self.stack = ResidualConvStack(cfg.hidden, 5, 4)
        self.proj = nn.Conv1d(cfg.hidden, 2 * cfg.d_z, 1)

    def embed_content(self, content: torch.Tensor) -> torch.Tensor:
        """``content``: ``B x D x T`` floats, or ``B x S x T`` integer codes."""
        if self.codes:
            if content.dtype not in (torch.int32, torch.int64) or content.shape[1] != len(self.code_tables):
                raise ValidationError(
                    f"codes-mode prior expects B x {len(self.code_tables)} x T integer codes, got "
                    f"{tuple(content.shape)} {content.dtype}")
            return sum(table(content[:, s]) for s, table in enumerate(self.code_tables)).transpose(1, 2)
        return self.content_in(content)

    def forward(self, content: torch.Tensor, pitch_bins: torch.Tensor) -> GaussianStats:
        t = min(content.shape[2], pitch_bins.shape[1])
        h = self.embed_content(content[:, :, :t])
        h = h + self.pitch_in(self.pitch_table(pitch_bins[:, :t]).transpose(1, 2))
        return GaussianStats.from_projection(self.proj(self.stack(h)))


class AffineCoupling(nn.Module):
    """Affine coupling on a 50/50 channel split, followed by a channel flip.

    The final projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, cond_dim: int):
        super().__init__()
        self.half = channels // 2
        self.pre = nn.Conv1d(self.half, hidden, 1)
        self.stack = ResidualConvStack(hidden, kernel, 2, cond_dim, dilation_growth=1)
        self.post = nn.Conv1d(hidden, 2 * self.half, 1)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def _shift_scale(self, xa, g):
        h = self.post(self.stack(self.pre(xa), g))
        shift, raw = torch.chunk(h, 2, dim=1)
        return shift, FLOW_SCALE_BOUND * torch.tanh(raw)

    def forward(self, x, g):
        xa, xb = x[:, :self.half], x[:, self.half:]
        shift, log_scale = self._shift_scale(xa, g)
        y = torch.cat([xa, xb * torch.exp(log_scale) + shift], dim=1)
        return torch.flip(y, [1]), log_scale.sum(dim=(1, 2))

    def inverse(self, y, g):
        y = torch.flip(y, [1])
        ya, yb = y[:, :self.half], y[:, self.half:]
        shift, log_scale = self._shift_scale(ya, g)
        x = torch.cat([ya, (yb - shift) * torch.exp(-log_scale)], dim=1)
        return x, -log_scale.sum(dim=(1, 2))


class Flow(nn.Module):
    """Speaker-conditioned coupling flow. ``forward`` maps z_p -> z_t, ``inverse`` maps z_q -> z_f."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            AffineCoupling(cfg.d_z, cfg.hidden, cfg.flow_kernel, cfg.speaker_dim) for _ in range(cfg.flow_blocks))

    def forward(self, z, g):
        log_det = torch.zeros(z.shape[0], dtype=z.dtype)
        for block in self.blocks:
            z, ld = block(z, g)
            log_det = log_det + ld
        return z, log_det

    def inverse(self, z, g):
        log_det = torch.zeros(z.shape[0], dtype=z.dtype)
        for block in reversed(self.blocks):
            z, ld = block.inverse(z, g)
            log_det = log_det + ld
        return z, log_det


def upsample_geometry(factor: int) -> Tuple[int, int]:
    """(kernel, padding) making a transposed conv scale length by exactly ``factor``."""
    return factor + 2 * (factor // 2), factor // 2


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3, dilations=(1, 3)):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, padding=_pad(kernel, d), dilation=d) for d in dilations)

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(leaky_relu(x))
        return x


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.decoder_channels
        self.pre = nn.Conv1d(cfg.d_z, ch, 7, padding=3)
        self.cond = nn.Linear(cfg.speaker_dim, ch)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for u in cfg.upsample:
            k, p = upsample_geometry(u)
            self.ups.append(nn.ConvTranspose1d(ch, ch // 2, k, stride=u, padding=p))
            ch //= 2
            self.blocks.append(ResBlock(ch))
        self.post = nn.Conv1d(ch, 1, 7, padding=3)
        self.hop = cfg.hop
        self.reset_parameters()

    def reset_parameters(self):
        """Variance-preserving init so the waveform starts near speech level rather than near silence."""
        gain = nn.init.calculate_gain("leaky_relu", 0.1)
        for m in self.modules():
            if isinstance(m, nn.ConvTranspose1d):
                fan_in = m.in_channels * m.kernel_size[0] / m.stride[0]
            elif isinstance(m, nn.Conv1d):
                fan_in = m.in_channels * m.kernel_size[0]
            else:
                continue
            nn.init.normal_(m.weight, 0.0, gain / math.sqrt(fan_in))
            nn.init.zeros_(m.bias)
        for block in self.blocks:
            for conv in block.convs:
                conv.weight.data.mul_(RESIDUAL_INIT_SCALE)
        self.post.weight.data.mul_(OUTPUT_INIT_SCALE / gain)

    def forward(self, z, g):
        x = self.pre(z) + self.cond(g)[:, :, None]
        for up, block in zip(self.ups, self.blocks):
            x = block(up(leaky_relu(x)))
        y = torch.tanh(self.post(leaky_relu(x)))[:, 0]
        # float32 tanh rounds to exactly +-1 for large inputs; keep samples strictly inside
        bound = 1.0 - torch.finfo(y.dtype).eps / 2
        return y.clamp(-bound, bound)


def period_reshape(wave: torch.Tensor, period: int) -> torch.Tensor:
    """``B x L`` -> ``B x 1 x ceil(L/period) x period`` with zero padding at the end."""
    b, n = wave.shape
    rows = -(-n // period)
    if rows * period != n:
        wave = F.pad(wave, (0, rows * period - n))
    return wave.view(b, 1, rows, period)


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, ch: int):
        super().__init__()
        self.period = period
        widths = [1, ch, 2 * ch, 2 * ch]
        self.convs = nn.ModuleList()
        for i in range(3):
            stride = (3, 1) if i < 2 else (1, 1)
            self.convs.append(nn.Conv2d(widths[i], widths[i + 1], (5, 1), stride, padding=(2, 0)))
        self.post = nn.Conv2d(widths[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, wave):
        x = period_reshape(wave, self.period)
        fmaps = []
        for conv in self.convs:
            x = leaky_relu(conv(x))
            fmaps.append(x)
        x = self.post(x)
        fmaps.append(x)
        return x.flatten(1), fmaps


class ScaleDiscriminator(nn.Module):
    def __init__(self, scale: int, ch: int):
        super().__init__()
        self.scale = scale
        c2 = 2 * ch
        self.convs = nn.ModuleList([
            nn.Conv1d(1, ch, 15, padding=7),
            nn.Conv1d(ch, c2, 41, stride=4, groups=4, padding=20),
            nn.Conv1d(c2, c2, 41, stride=4, groups=8, padding=20),
            nn.Conv1d(c2, c2, 5, padding=2),
        ])
        self.post = nn.Conv1d(c2, 1, 3, padding=1)

    def forward(self, wave):
        x = wave[:, None]
        if self.scale > 1:
            x = F.avg_pool1d(x, self.scale, self.scale)
        fmaps = []
        for conv in self.convs:
            x = leaky_relu(conv(x))
            fmaps.append(x)
        x = self.post(x)
        fmaps.append(x)
        return x.flatten(1), fmaps


class DiscriminatorBank(nn.Module):
    """Multi-period plus multi-scale sub-discriminators."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.discs = nn.ModuleList(
            [PeriodDiscriminator(p, cfg.disc_channels) for p in cfg.mpd_periods]
            + [ScaleDiscriminator(s, cfg.disc_channels) for s in cfg.msd_scales])

    def forward(self, wave: torch.Tensor) -> Tuple[List[torch.Tensor], List[List[torch.Tensor]]]:
        if wave.dim() == 1:
            wave = wave[None]
        if wave.shape[-1] < MIN_DISC_LENGTH:
            raise ValidationError(f"discriminator input needs >= {MIN_DISC_LENGTH} samples, got {wave.shape[-1]}")
        scores, fmaps = [], []
        for d in self.discs:
            s, f = d(wave)
            scores.append(s)
            fmaps.append(f)
        return scores, fmaps


class SvcModel(nn.Module):
    """Generator side: encoders, flow, decoder and the speaker encoder feeding them."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.speaker = SpeakerEncoder(cfg.n_mels, cfg.speaker_dim)
        self.posterior = PosteriorEncoder(cfg)
        self.prior = PriorEncoder(cfg)
        self.flow = Flow(cfg)
        self.decoder = Decoder(cfg)

    def encode_posterior(self, mel, g) -> GaussianStats:
        return self.posterior(mel, g)

    def encode_prior(self, content, pitch_bins) -> GaussianStats:
        return self.prior(content, pitch_bins)

    def flow_forward(self, z: LatentSample, g) -> LatentSample:
        zt, log_det = self.flow(z.z, g)
        return LatentSample(zt, "z_t", log_det)

    def flow_inverse(self, z: LatentSample, g) -> LatentSample:
        zf, log_det = self.flow.inverse(z.z, g)
        return LatentSample(zf, "z_f", log_det)

    def decode(self, z, g) -> torch.Tensor:
        z = z.z if isinstance(z, LatentSample) else z
        return self.decoder(z, g)


def build_models(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> Tuple[SvcModel, DiscriminatorBank]:
    torch.manual_seed(seed)
    return SvcModel(cfg), DiscriminatorBank(cfg)
