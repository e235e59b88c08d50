import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tone
from zsvc.audio_io import AudioClip
from zsvc.errors import ValidationError
from zsvc.metrics import MetricReport, evaluate, mel_l1, secs, stoi, third_octave_matrix, write_summary
from zsvc.speaker import SpeakerEncoder

SR = 32000


def speechy(seconds=1.0, seed=0, sr=SR):
    """Amplitude-modulated harmonic signal with a varying envelope per band."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    x = np.zeros_like(t)
    for h in range(1, 25):
        x += np.sin(2 * np.pi * 180 * h * t + rng.uniform(0, 2 * np.pi)) / h
    env = 0.5 + 0.5 * np.sin(2 * np.pi * 3.0 * t) ** 2
    return AudioClip(0.3 * x * env / np.abs(x).max(), sr)


@pytest.fixture(scope="module")
def eval_encoder():
    torch.manual_seed(99)
    return SpeakerEncoder()


def test_third_octave_matrix_shape():
    m = third_octave_matrix()
    assert m.shape == (15, 257)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert (m.sum(axis=0) <= 1).all()


def test_stoi_identity_and_noise():
    a = speechy()
    assert stoi(a, a) == pytest.approx(1.0, abs=1e-6)
    noise = np.random.default_rng(1).standard_normal(len(a))
    noise *= np.sqrt(np.mean(a.samples ** 2) / np.mean(noise ** 2)) * 10 ** (10 / 20)
    assert stoi(a, AudioClip(a.samples + noise, SR)) < 0.6


@pytest.mark.parametrize("gain", [0.1, 3.0])
def test_stoi_gain_invariant(gain):
    a = speechy()
    b = AudioClip(a.samples + 0.05 * np.random.default_rng(2).standard_normal(len(a)), SR)
    scaled = AudioClip(gain * b.samples, SR)
    assert stoi(a, scaled) == pytest.approx(stoi(a, b), abs=1e-6)


def test_stoi_errors():
    with pytest.raises(ValidationError):
        stoi(AudioClip(np.zeros(SR), SR), speechy())
    with pytest.raises(ValidationError):
        stoi(speechy(0.2), speechy(0.2))
    with pytest.raises(ValidationError):
        stoi(speechy(1.0), speechy(0.5))


def test_secs_anchors(eval_encoder):
    a = speechy()
    assert secs(a, a, eval_encoder) == pytest.approx(1.0, abs=1e-6)
    b = tone(300.0, 0.5, 0.4)
    assert secs(a, b, eval_encoder) == pytest.approx(secs(b, a, eval_encoder), abs=1e-12)
    assert -1.0 <= secs(a, b, eval_encoder) <= 1.0
    assert secs(a, AudioClip(0.5 * a.samples, SR), eval_encoder) >= 0.99
    with pytest.raises(ValidationError):
        secs(AudioClip(np.zeros(0), SR), a, eval_encoder)


def test_mel_l1_anchors():
    a = speechy(0.5)
    assert mel_l1(a, a) == 0.0
    from zsvc.dsp import log_mel
    ma = log_mel(a).frames
    mb = log_mel(AudioClip(2 * a.samples, SR)).frames
    energetic = ma > np.log(1e-2)
    np.testing.assert_allclose((mb - ma)[energetic], math.log(2), atol=1e-3)
    with pytest.raises(ValidationError):
        mel_l1(a, speechy(0.3))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000))
def test_mel_l1_triangle_inequality(s1, s2, s3):
    clips = [AudioClip(np.random.default_rng(s).standard_normal(3200) * 0.1, SR) for s in (s1, s2, s3)]
    a, b, c = clips
    assert mel_l1(a, c) <= mel_l1(a, b) + mel_l1(b, c) + 1e-12


def test_evaluate_report(eval_encoder, tmp_path):
    a = speechy()
    rep = evaluate(a, a, speechy(seed=3), eval_encoder)
    assert rep.secs_vs_source == pytest.approx(1.0, abs=1e-6)
    assert rep.stoi_vs_source == pytest.approx(1.0, abs=1e-6)
    assert rep.mel_l1_vs_source == 0.0
    text = rep.to_text()
    assert [line.split("=")[0] for line in text.splitlines()] == [
        "secs_vs_reference", "secs_vs_source", "stoi_vs_source", "mel_l1_vs_source"]
    write_summary([("x", rep)], tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0].startswith("name,secs_vs_reference") and rows[1].startswith("x,")


def test_report_rejects_non_finite():
    with pytest.raises(ValidationError):
        MetricReport(float("nan"), 0.0, 0.0, 0.0)
