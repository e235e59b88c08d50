"""Flat ``key=value`` run configuration covering model, DSP, loss and training fields."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple

from .dsp import SpectroConfig
from .errors import ValidationError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 9.0
    w_adv: float = 1.0
    w_fmap: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"loss weight {f.name} must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    content_dim: int = 64
    content_mode: str = "tensor"  # tensor | codes
    n_codes: int = 0
    code_stages: int = 1
    pitch_bins: int = 256
    pitch_embed: int = 64
    hidden: int = 128
    d_z: int = 32
    speaker_dim: int = 256
    flow_blocks: int = 2
    flow_kernel: int = 5
    decoder_channels: int = 256
    upsample: Tuple[int, ...] = (5, 4, 4, 4)
    mpd_periods: Tuple[int, ...] = (2, 3, 5)
    msd_scales: Tuple[int, ...] = (1, 2, 4)
    disc_channels: int = 16

    def __post_init__(self):
        if self.d_z % 2:
            raise ValidationError("d_z must be even for the coupling split")
        if self.content_mode not in ("tensor", "codes"):
            raise ValidationError(f"content_mode must be tensor|codes, got {self.content_mode!r}")
        if self.content_mode == "codes" and self.n_codes < 1:
            raise ValidationError("codes mode needs n_codes >= 1")

    @property
    def hop(self) -> int:
        out = 1
        for u in self.upsample:
            out *= u
        return out


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 1234
    steps: int = 500
    batch_size: int = 1
    segment_frames: int = 50
    learning_rate: float = 2e-4
    adam_beta1: float = 0.8
    adam_beta2: float = 0.99
    adam_eps: float = 1e-9
    freeze_speaker: bool = False
    content_provider: str = "synthetic"
    content_seed: int = 0
    compression: str = "none"  # none | kmeans | rvq
    mode: str = "tensor"  # tensor | codes
    kmeans_k: int = 900
    rvq_stages: int = 4
    rvq_codes: int = 64
    codebook_iters: int = 50
    checkpoint_interval: int = 0
    f0_min: float = 50.0
    f0_max: float = 1100.0
    dis_orientation: str = "lsgan"  # lsgan | printed
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    spectro: SpectroConfig = field(default_factory=SpectroConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.segment_frames < 2:
            raise ValidationError("segment_frames must be >= 2")
        if self.compression not in ("none", "kmeans", "rvq"):
            raise ValidationError(f"compression must be none|kmeans|rvq, got {self.compression!r}")
        if self.mode not in ("tensor", "codes"):
            raise ValidationError(f"mode must be tensor|codes, got {self.mode!r}")
        if self.mode == "codes" and self.compression == "none":
            raise ValidationError("mode=codes needs compression kmeans or rvq")
        if self.dis_orientation not in ("lsgan", "printed"):
            raise ValidationError("dis_orientation must be lsgan|printed")
        if self.model.hop != self.spectro.hop:
            raise ValidationError(f"decoder upsampling {self.model.hop} must equal hop {self.spectro.hop}")
        if self.model.n_mels != self.spectro.n_mels:
            raise ValidationError("model n_mels must equal spectro n_mels")
        if self.checkpoint_interval < 0:
            raise ValidationError("checkpoint_interval must be >= 0")

    @property
    def segment_samples(self) -> int:
        return self.segment_frames * self.spectro.hop

    def resolved_model(self) -> ModelConfig:
        """Model config with the content-input fields derived from the content settings."""
        if self.mode == "codes":
            n_codes = self.kmeans_k if self.compression == "kmeans" else self.rvq_codes
            stages = 1 if self.compression == "kmeans" else self.rvq_stages
            return dataclasses.replace(self.model, content_mode="codes", n_codes=n_codes, code_stages=stages)
        return dataclasses.replace(self.model, content_mode="tensor", n_codes=0, code_stages=1)


_DERIVED = ("content_mode", "n_codes", "code_stages")


# key -> (section, field); sections: "" train, "weights", "model", "spectro"
def _key_map():
    out = {}
    for f in fields(TrainConfig):
        if f.name not in ("weights", "model", "spectro"):
            out[f.name] = ("", f.name)
    for section, cls in (("weights", LossWeights), ("model", ModelConfig), ("spectro", SpectroConfig)):
        for f in fields(cls):
            if f.name in out or f.name in _DERIVED:
                continue
            out[f.name] = (section, f.name)
    return out


KEYS = _key_map()
_SECTIONS = {"weights": LossWeights, "model": ModelConfig, "spectro": SpectroConfig, "": TrainConfig}


def _field_type(section: str, name: str):
    for f in fields(_SECTIONS[section]):
        if f.name == name:
            return f
    raise KeyError(name)


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ValidationError(f"bad value for config key {key!r}: {raw!r}") from None


def _default(section: str, name: str):
    f = _field_type(section, name)
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def parse_config(text: str) -> TrainConfig:
    values = {"": {}, "weights": {}, "model": {}, "spectro": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ValidationError(f"unknown config key {key!r}")
        section, name = KEYS[key]
        default = _default(section, name)
        if name == "fmax" and default is None:
            default = 0.0
        values[section][name] = _convert(key, raw, default)
    spectro = SpectroConfig(**values["spectro"])
    model = dict(values["model"])
    model.setdefault("n_mels", spectro.n_mels)
    train = values[""]
    return TrainConfig(weights=LossWeights(**values["weights"]), model=ModelConfig(**model),
                       spectro=spectro, **train)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, (section, name) in KEYS.items():
        obj = cfg if section == "" else getattr(cfg, section)
        v = getattr(obj, name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"
