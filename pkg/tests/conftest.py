import numpy as np
import pytest
import torch

from zsvc.audio_io import AudioClip
from zsvc.config import ModelConfig
from zsvc.nn import set_deterministic

SR = 32000


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic()


def tone(freq, seconds=1.0, amp=1.0, sr=SR, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t + phase), sr)


@pytest.fixture
def small_cfg():
    return ModelConfig(hidden=16, d_z=8, speaker_dim=16, decoder_channels=16, pitch_embed=8,
                       content_dim=6, disc_channels=4)


def direct_dft(x, freqs, sr):
    """Naive DFT magnitude at arbitrary frequencies."""
    n = np.arange(len(x))
    out = []
    for f in freqs:
        out.append(abs(np.sum(x * np.exp(-2j * np.pi * f * n / sr))))
    return np.array(out)


def tiny_train_config(**overrides):
    from zsvc.config import TrainConfig
    model = ModelConfig(hidden=8, d_z=4, speaker_dim=8, decoder_channels=16, pitch_embed=4, content_dim=6,
                        disc_channels=4, flow_blocks=1)
    base = dict(seed=7, steps=3, segment_frames=8, model=model, codebook_iters=5)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    from zsvc.training import synthetic_dataset
    return synthetic_dataset(n_speakers=2, clips_per_speaker=1, seconds=0.3, seed=1)
