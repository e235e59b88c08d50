"""Acceptance criteria 1-12, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The overfit and
end-to-end runs train the default desk model and take a few minutes on one
CPU core.
"""

import contextlib
import io
import sys
import time

import numpy as np
import pytest
import torch

from zsvc import verify
from zsvc.audio_io import read_wav
from zsvc.cli import main
from zsvc.config import TrainConfig
from zsvc.nn import set_deterministic
from zsvc.training import (fit_pipeline, load_checkpoint, make_batch, new_state, prepare_clips, synthetic_dataset,
                           train, train_step)


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail=""):
        with capsys.disabled():
            sys.stdout.write(f"\n[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}\n")
        return passed
    return emit


def _failures(results):
    return [f"{r.name} ({r.detail})" for r in results if not r.passed]


def _run_group(report, number, title, results):
    bad = _failures(results)
    detail = f"{len(results)} checks" + (f"; failed: {bad}" if bad else "")
    assert report(number, title, not bad, detail), bad


def test_01_gradient_suite(report):
    start = time.perf_counter()
    results = verify.check_gradients()
    elapsed = time.perf_counter() - start
    bad = _failures(results)
    ok = not bad and elapsed < 60.0
    worst32 = max(float(r.detail.split()[2]) for r in results if "float32" in r.name)
    worst64 = max(float(r.detail.split()[2]) for r in results if "float64" in r.name)
    detail = (f"{len(results)} checks, worst float32 {worst32:.1e} (< 1e-2), worst float64 {worst64:.1e} "
              f"(< 1e-4), {elapsed:.1f} s (< 60 s)")
    assert report(1, "gradient suite", ok, detail + (f"; failed: {bad}" if bad else "")), bad


def test_02_flow_invariants(report):
    _run_group(report, 2, "flow invariants", verify.check_flow(100))


def test_03_loss_anchors(report):
    _run_group(report, 3, "loss anchors", verify.check_loss_anchors())


def test_04_monte_carlo_kl(report):
    r = verify.check_kl_monte_carlo(10_000)
    assert report(4, "Monte-Carlo KL unbiasedness", r.passed, r.detail)


def test_05_compression_oracles(report):
    _run_group(report, 5, "compression oracles", verify.check_compression())


def test_06_retrieval_oracle(report):
    _run_group(report, 6, "retrieval oracle", verify.check_retrieval())


def test_07_dsp_anchors(report):
    _run_group(report, 7, "DSP anchors", verify.check_dsp())


def test_08_metric_anchors(report):
    _run_group(report, 8, "metric anchors", verify.check_metrics())


def test_09_overfit(report):
    set_deterministic()
    cfg = TrainConfig(steps=500)
    dataset = synthetic_dataset(1, 1, 1.0, seed=0)
    pipeline = fit_pipeline(dataset, cfg)
    state = new_state(cfg, pipeline)
    clips = prepare_clips(dataset, pipeline, cfg)
    mels, finite = [], True
    start = time.perf_counter()
    while state.step < cfg.steps:
        parts = train_step(state, make_batch(clips, cfg, state.rng()))
        finite &= all(np.isfinite(v) for v in parts.as_dict().values())
        mels.append(parts.l_mel)
    elapsed = time.perf_counter() - start
    first, last = float(np.mean(mels[:10])), float(np.mean(mels[-10:]))
    ratio = last / first
    ok = ratio <= 0.2 and elapsed < 600 and finite
    detail = (f"l_mel steps 1-10 {first:.3f}, steps 491-500 {last:.3f}, ratio {ratio:.3f} (<= 0.2), "
              f"{elapsed:.0f} s (< 600 s), finite={finite}")
    assert report(9, "overfit experiment", ok, detail)


def test_10_end_to_end(report, tmp_path):
    data, ckpt = tmp_path / "data", tmp_path / "ckpt"
    assert main(["synth", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--steps", "200"]) == 0
    model = str(ckpt / "final.svck")
    wavs = sorted(data.glob("*.wav"))
    source, reference = wavs[0], wavs[-1]
    store = tmp_path / "db"
    assert main(["store", "build", "--dir", str(data), "--encoder", model, "--out", str(store)]) == 0
    base = ["convert", "--source", str(source), "--reference", str(reference), "--model", model, "--seed", "11"]
    outs = {}
    for name, extra in (("plain", []), ("plain2", []), ("retrieval", ["--retrieval", "--store", str(store)]),
                        ("retrieval2", ["--retrieval", "--store", str(store)])):
        outs[name] = tmp_path / f"{name}.wav"
        assert main(base + extra + ["--out", str(outs[name])]) == 0
    n_src = len(read_wav(source))
    lengths_ok = all(abs(len(read_wav(p)) - n_src) <= 320 for p in outs.values())
    finite = all(np.isfinite(read_wav(p).samples).all() for p in outs.values())
    reproducible = (outs["plain"].read_bytes() == outs["plain2"].read_bytes()
                    and outs["retrieval"].read_bytes() == outs["retrieval2"].read_bytes())
    enc = tmp_path / "eval_enc.svck"
    assert main(["encoder", "init", "--seed", "2024", "--out", str(enc)]) == 0
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(["eval", "--converted", str(outs["retrieval"]), "--source", str(source), "--reference",
                     str(reference), "--encoder", str(enc)])
    fields = dict(line.split("=") for line in buf.getvalue().split())
    complete = code == 0 and set(fields) == {"secs_vs_reference", "secs_vs_source", "stoi_vs_source",
                                             "mel_l1_vs_source"}
    complete &= all(np.isfinite(float(v)) for v in fields.values())
    ok = lengths_ok and finite and reproducible and complete
    detail = (f"lengths within one hop={lengths_ok}, finite={finite}, bit-reproducible={reproducible}, "
              f"report={' '.join(f'{k}={float(v):.3f}' for k, v in fields.items())}")
    assert report(10, "end-to-end train/convert/eval", ok, detail)


def test_11_freeze_contract(report):
    set_deterministic()
    cfg = TrainConfig(steps=3, freeze_speaker=True)
    dataset = synthetic_dataset(2, 1, 1.0, seed=0)
    pipeline = fit_pipeline(dataset, cfg)
    state = new_state(cfg, pipeline)
    clips = prepare_clips(dataset, pipeline, cfg)
    before = {k: v.clone() for k, v in state.model.speaker.state_dict().items()}
    other = state.model.decoder.post.weight.clone()
    while state.step < cfg.steps:
        train_step(state, make_batch(clips, cfg, state.rng()))
    frozen = all(torch.equal(v, before[k]) for k, v in state.model.speaker.state_dict().items())
    trained = not torch.equal(other, state.model.decoder.post.weight)
    assert report(11, "freeze contract", frozen and trained,
                  f"speaker parameters bit-identical={frozen}, decoder updated={trained}")


def test_12_reproducibility(report, tmp_path):
    cfg = TrainConfig(steps=6, checkpoint_interval=3)
    dataset = synthetic_dataset(2, 2, 1.0, seed=0)
    a = train(dataset, cfg, tmp_path / "a")
    b = train(dataset, cfg, tmp_path / "b")
    identical = a.read_bytes() == b.read_bytes()
    resumed = train(dataset, cfg, tmp_path / "r", resume=str(tmp_path / "a" / "step_000003.svck"))
    sa, sr = load_checkpoint(a), load_checkpoint(resumed)
    params_equal = all(torch.equal(x, y) for x, y in zip(sa.model.state_dict().values(),
                                                         sr.model.state_dict().values()))
    params_equal &= all(torch.equal(x, y) for x, y in zip(sa.disc.state_dict().values(),
                                                          sr.disc.state_dict().values()))
    resume_bytes = a.read_bytes() == resumed.read_bytes()
    ok = identical and params_equal and resume_bytes
    assert report(12, "reproducibility", ok,
                  f"same-seed checkpoints byte-identical={identical}, resume 3+3 parameters equal={params_equal}, "
                  f"resume checkpoint byte-identical={resume_bytes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
