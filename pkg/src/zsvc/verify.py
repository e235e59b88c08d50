"""Invariant checks behind ``zsvc verify``: gradients, flow, loss values, oracles.

Each check returns a :class:`CheckResult`; :func:`run_all` runs every group.
The numbers here are the project's acceptance tolerances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn as tnn

from . import nn
from .audio_io import AudioClip
from .config import LossWeights, ModelConfig
from .content import kmeans_fit, kmeans_quantize, Mode, pairwise_sq_dists, rvq_fit
from .dsp import SpectroConfig, estimate_f0, hann_window, hz_to_mel, log_mel, stft
from .losses import (LogMel, LossBreakdown, gaussian_kl, l_adv, l_dis, l_fmap, l_gen, l_kl, l_mel, l_stft, l_wav)
from .metrics import secs, stoi
from .model import Flow, GaussianStats
from .speaker import EmbeddingStore, SpeakerEmbedding, SpeakerEncoder, retrieval_average, top_k


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _float32(make):
    """Build a module with float32 initialization so every precision sees the same weights."""
    with nn.precision(torch.float32):
        torch.manual_seed(0)
        return make()


def _data(dtype, seed=0):
    gen = torch.Generator().manual_seed(seed)

    def rnd(*shape, scale=1.0):
        return (scale * torch.randn(*shape, generator=gen, dtype=torch.float64)).to(dtype)
    return rnd


def _weigh(t, seed=1):
    w = torch.randn(t.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return (t * w.to(t.dtype)).sum()


def _layer_builder(make, shape, act=torch.tanh):
    def build(dtype):
        layer = _float32(make).to(dtype)
        x = nn.Parameter(_data(dtype)(*shape))
        return (lambda: _weigh(act(layer(x)))), [x] + list(layer.parameters())
    return build


def _elementwise(dtype):
    rnd = _data(dtype, 3)
    x = nn.Parameter(rnd(4, 5).abs() + 0.5)
    table = nn.Parameter(rnd(6, 3))
    idx = torch.tensor([0, 2, 2, 5])

    def fn():
        a = torch.sigmoid(x) * torch.exp(0.3 * x) + torch.log(x) + nn.leaky_relu(x - 1.0)
        b = nn.concat([a[:, 1:4], nn.embedding(idx, table)], dim=1)
        return _weigh(b) + _weigh(F.avg_pool1d(a[None], 2, 2), 2)
    return fn, [x, table]


def _logmel(dtype):
    mel = LogMel(SpectroConfig(sample_rate=8000, n_fft=64, hop=16, win_length=64, n_mels=8))
    x = nn.Parameter(_data(dtype, 4)(1, 256, scale=0.3))
    return (lambda: _weigh(mel(x))), [x]


def _loss_builders() -> Dict[str, Callable]:
    def make(dtype):
        rnd = _data(dtype, 0)
        real, fake = rnd(1, 1200, scale=0.5), nn.Parameter(rnd(1, 1200, scale=0.5))
        mel_r, mel_f = rnd(1, 6, 5), nn.Parameter(rnd(1, 6, 5))
        mu, ls = nn.Parameter(rnd(1, 4, 6)), nn.Parameter(rnd(1, 4, 6, scale=0.3))
        mu2, ls2 = rnd(1, 4, 6), rnd(1, 4, 6, scale=0.3)
        nq, npp = rnd(1, 4, 6), rnd(1, 4, 6)
        scores = [nn.Parameter(rnd(1, 9)), nn.Parameter(rnd(1, 5))]
        fmaps = [[nn.Parameter(rnd(1, 3, 4)), nn.Parameter(rnd(1, 7))]]
        ref_maps = [[rnd(1, 3, 4), rnd(1, 7)]]
        flow = _float32(lambda: Flow(ModelConfig(d_z=4, hidden=4, speaker_dim=3, flow_blocks=1))).to(dtype)
        with torch.no_grad():
            for p in flow.blocks[0].post.parameters():
                p.copy_(rnd(*p.shape, scale=0.1))
        g = rnd(1, 3)
        return {
            "l_wav": (lambda: l_wav(real, fake), [fake]),
            "l_mel": (lambda: l_mel(mel_r, mel_f), [mel_f]),
            "gaussian_kl": (lambda: gaussian_kl(GaussianStats(mu, ls), GaussianStats(mu2, ls2)), [mu, ls]),
            "l_kl": (lambda: l_kl(GaussianStats(mu, ls), GaussianStats(mu2, ls2), flow, g, nq, npp),
                     [mu, ls] + list(flow.parameters())),
            "l_stft": (lambda: l_stft(real, fake), [fake]),
            "l_dis": (lambda: l_dis(scores, [s * 0.5 for s in scores]), scores),
            "l_adv": (lambda: l_adv(scores), scores),
            "l_fmap": (lambda: l_fmap(ref_maps, fmaps), [p for layer in fmaps for p in layer]),
        }
    names = ["l_wav", "l_mel", "gaussian_kl", "l_kl", "l_stft", "l_dis", "l_adv", "l_fmap"]
    return {n: (lambda d, n=n: make(d)[n]) for n in names}


def gradient_builders() -> Dict[str, Callable]:
    """Every layer type and every loss as ``build(dtype) -> (fn, params)``."""
    out = {
        "linear": _layer_builder(lambda: tnn.Linear(6, 4), (3, 6)),
        "conv1d": _layer_builder(lambda: tnn.Conv1d(3, 4, 5, stride=2, padding=4, dilation=2), (2, 3, 20)),
        "conv1d_grouped": _layer_builder(lambda: tnn.Conv1d(4, 4, 5, groups=2, padding=2), (1, 4, 12)),
        "conv_transpose1d": _layer_builder(lambda: tnn.ConvTranspose1d(3, 2, 8, stride=4, padding=2), (1, 3, 6)),
        "conv2d": _layer_builder(lambda: tnn.Conv2d(1, 3, (5, 1), (3, 1), padding=(2, 0)), (1, 1, 12, 2)),
        "channel_layer_norm": _layer_builder(lambda: nn.ChannelLayerNorm(5), (2, 5, 7)),
        "leaky_relu_layer": _layer_builder(lambda: tnn.Conv1d(3, 3, 3, padding=1), (1, 3, 9), act=nn.leaky_relu),
        "elementwise_embedding_concat_pool": _elementwise,
        "log_mel": _logmel,
    }
    out.update(_loss_builders())
    return out


GRAD_TOL = {torch.float32: 1e-2, torch.float64: 1e-4}


def check_gradients(names: Sequence[str] = None) -> List[CheckResult]:
    builders = gradient_builders()
    results = []
    for name in names or builders:
        for dtype, tol in GRAD_TOL.items():
            err = nn.check_gradients(builders[name], dtype, max_coords=12)
            label = "float32" if dtype == torch.float32 else "float64"
            results.append(CheckResult(f"grad {name} {label}", err < tol, f"rel err {err:.2e} < {tol:g}"))
    return results


# --- flow ------------------------------------------------------------------

def perturbed_flow(cfg: ModelConfig = ModelConfig(), scale: float = 0.1, seed: int = 0) -> Flow:
    torch.manual_seed(seed)
    flow = Flow(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in flow.blocks:
            for p in block.post.parameters():
                p.copy_(scale * torch.randn(p.shape, generator=gen))
    return flow


def check_flow(n: int = 100) -> List[CheckResult]:
    cfg = ModelConfig()
    gen = torch.Generator().manual_seed(1)
    z = torch.randn(n, cfg.d_z, 16, generator=gen)
    g = torch.randn(n, cfg.speaker_dim, generator=gen)
    torch.manual_seed(0)
    fresh = Flow(cfg)
    flow = perturbed_flow(cfg)
    with torch.no_grad():
        z0, ld0 = fresh(z, g)
        zt, ld_f = flow(z, g)
        back, ld_i = flow.inverse(zt, g)
        zf, ld_i2 = flow.inverse(z, g)
        again, ld_f2 = flow(zf, g)
    round_trip = max(float((back - z).abs().max()), float((again - z).abs().max()))
    per_element = cfg.d_z * z.shape[2]
    anti = max(float(((ld_f + ld_i) / per_element).abs().max()), float(((ld_f2 + ld_i2) / per_element).abs().max()))
    return [
        CheckResult("flow identity at zero init", bool(torch.equal(z0, z) and not ld0.any()), "exact"),
        CheckResult("flow inverse(forward(z)) = z", round_trip < 1e-4, f"max abs {round_trip:.2e} < 1e-4"),
        CheckResult("flow log-det antisymmetry", anti < 1e-5, f"per element {anti:.2e} < 1e-5"),
    ]


# --- loss anchors ----------------------------------------------------------

def _full(v, shape=(1, 4, 8)):
    return torch.full(shape, float(v), dtype=torch.float64)


def _stats(mu, var):
    return GaussianStats(_full(mu), _full(0.5 * math.log(var)))


def _identity_flow():
    torch.manual_seed(0)
    return Flow(ModelConfig(d_z=4, hidden=4, speaker_dim=3)).double()


def check_loss_anchors() -> List[CheckResult]:
    flow = _identity_flow()
    g = torch.zeros(1, 3, dtype=torch.float64)
    zero = _full(0)
    with torch.no_grad():
        table = [
            ("l_gen unit components", l_gen(LossBreakdown(*([1.0] * 6)), LossWeights()), 13.2),
            ("l_gen l_stft=2", l_gen(LossBreakdown(l_stft=2.0)), 18.0),
            ("gaussian_kl N(1,1)||N(0,1)", gaussian_kl(_stats(1, 1), _stats(0, 1)), 0.5),
            ("gaussian_kl N(0,4)||N(0,1)", gaussian_kl(_stats(0, 4), _stats(0, 1)), math.log(0.5) + 1.5),
            ("l_dis perfect", l_dis([_full(1)], [_full(0)]), 0.0),
            ("l_dis inverted", l_dis([_full(0)], [_full(1)]), 2.0),
            ("l_adv 0.5", l_adv([_full(0.5)]), 0.25),
            ("l_wav 1 vs 0", l_wav(_full(1), _full(0)), 2.0),
            ("l_kl identical", l_kl(_stats(0.3, 2), _stats(0.3, 2), flow, g, zero, zero), 0.0),
            ("l_kl unit gap", l_kl(_stats(1, 1), _stats(0, 1), flow, g, zero, zero), 1.0),
            ("l_fmap gaps 1 and 0.5", l_fmap([[_full(0), _full(0)]], [[_full(1), _full(0.5)]]), 1.5),
        ]
        real = torch.as_tensor(np.random.default_rng(5).standard_normal(8000))[None]
        scaled = float(l_stft(real, 2 * real))
    out = []
    for name, got, want in table:
        got = float(got)
        out.append(CheckResult(f"loss {name}", abs(got - want) <= 1e-6, f"{got:.8f} vs {want:.8f}"))
    want = 3 * (1 + math.log(2))
    out.append(CheckResult("loss l_stft(x, 2x)", abs(scaled - want) < 1e-4, f"{scaled:.6f} vs {want:.6f}"))
    return out


def check_kl_monte_carlo(draws: int = 10_000, seed: int = 0) -> CheckResult:
    flow = _identity_flow()
    g = torch.zeros(1, 3, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    shape = (1, 4, 8)
    post = GaussianStats(torch.as_tensor(rng.normal(0, 1, shape)), torch.as_tensor(rng.normal(0, 0.4, shape)))
    prior = GaussianStats(torch.as_tensor(rng.normal(0, 1, shape)), torch.as_tensor(rng.normal(0, 0.4, shape)))
    values = np.empty(draws)
    with torch.no_grad():
        for i in range(draws):
            nq = torch.as_tensor(rng.standard_normal(shape))
            npp = torch.as_tensor(rng.standard_normal(shape))
            values[i] = float(l_kl(post, prior, flow, g, nq, npp))
        expected = float(gaussian_kl(post, prior) + gaussian_kl(prior, post))
    se = values.std(ddof=1) / math.sqrt(draws)
    gap = abs(values.mean() - expected)
    return CheckResult("l_kl Monte-Carlo vs closed form", gap < 3 * se,
                       f"|{values.mean():.5f} - {expected:.5f}| = {gap:.2e} < 3 SE = {3 * se:.2e}")


# --- compression and retrieval oracles -------------------------------------

def check_compression() -> List[CheckResult]:
    rng = np.random.default_rng(0)
    data = rng.standard_normal((400, 8))
    cb = kmeans_fit(data, 8, iters=30, seed=0)
    frames = rng.standard_normal((1000, 8))
    codes = kmeans_quantize(frames, cb, Mode.CODES)
    d = pairwise_sq_dists(frames, cb.centroids)
    brute = np.array([min(range(cb.k), key=lambda j: (d[i, j], j)) for i in range(len(frames))])
    trace = np.asarray(cb.inertia_trace)
    rvq = rvq_fit(data, 4, 8, iters=30, seed=0)
    energy = np.asarray(rvq.residual_energy)
    sep = np.concatenate([np.zeros((10, 2)), np.full((10, 2), 10.0)])
    two = kmeans_fit(sep, 2, iters=20, seed=0)
    recovered = sorted(map(tuple, two.centroids)) == [(0.0, 0.0), (10.0, 10.0)]
    return [
        CheckResult("kmeans quantize = brute force (1000 frames)", bool(np.array_equal(codes, brute)), "exact"),
        CheckResult("kmeans inertia non-increasing", bool(np.all(np.diff(trace) <= 1e-12 * trace[0])),
                    f"{len(trace)} iterations"),
        CheckResult("rvq residual energy non-increasing (4 stages)", bool(np.all(np.diff(energy) <= 0)),
                    " > ".join(f"{e:.3f}" for e in energy)),
        CheckResult("kmeans separated clusters recovered", recovered, "exact"),
    ]


def check_retrieval() -> List[CheckResult]:
    rng = np.random.default_rng(0)
    embs = [SpeakerEmbedding.normalized(rng.standard_normal(64)) for _ in range(1000)]
    store = EmbeddingStore.from_embeddings([(f"s{i}", e) for i, e in enumerate(embs)])
    query = SpeakerEmbedding.normalized(rng.standard_normal(64))
    sims = [float(e.vector @ query.vector) for e in embs]
    out = []
    for k in (1, 3, 10):
        brute = sorted(range(len(embs)), key=lambda i: (-sims[i], i))[:k]
        got = [sid for sid, _ in top_k(store, query, k)]
        out.append(CheckResult(f"top_k brute force k={k}", got == [f"s{i}" for i in brute], "exact"))
    copies = EmbeddingStore.from_embeddings([(f"c{i}", query) for i in range(3)])
    fixed = retrieval_average(query, copies, 3)
    err = float(np.abs(fixed.vector - query.vector).max())
    out.append(CheckResult("retrieval_average fixed point", err <= 1e-6, f"max abs {err:.1e}"))
    e1 = SpeakerEmbedding(np.array([1.0, 0.0]))
    e2 = SpeakerEmbedding(np.array([0.0, 1.0]))
    two = retrieval_average(e1, EmbeddingStore.from_embeddings([("a", e1), ("b", e2)]), 2)
    want = np.array([2.0, 1.0]) / math.sqrt(5.0)
    err = float(np.abs(two.vector - want).max())
    out.append(CheckResult("retrieval_average 2-D closed form", err <= 1e-6, f"max abs {err:.1e}"))
    return out


# --- DSP and metric anchors ------------------------------------------------

def _tone(freq, seconds=1.0, amp=1.0, sr=32000):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)


def check_dsp() -> List[CheckResult]:
    cfg = SpectroConfig()
    hann = hann_window(4)
    mel1000 = float(hz_to_mel(1000.0))
    n_frames = log_mel(_tone(440.0), cfg).n_frames
    spec = np.abs(stft(_tone(3125.0), cfg))
    peaks = spec[1:-1].argmax(axis=1)
    track = estimate_f0(_tone(440.0, amp=0.5), cfg=cfg)
    voiced = track.f0_hz[track.voiced]
    f0_err = float(np.abs(voiced - 440.0).max()) if voiced.size else float("inf")
    return [
        CheckResult("periodic Hann(4)", bool(np.allclose(hann, [0, 0.5, 1, 0.5], atol=1e-15)), np.array2string(hann, precision=6)),
        CheckResult("HTK mel(1000 Hz)", abs(mel1000 - 1000.0) <= 0.5, f"{mel1000:.4f}"),
        CheckResult("frames for 1 s at hop 320", n_frames == 101, str(n_frames)),
        CheckResult("3125 Hz tone peaks at bin 100", bool(np.all(peaks == 100)), f"bins {sorted(set(int(p) for p in peaks))}"),
        CheckResult("YIN 440 Hz within 2 Hz", f0_err <= 2.0 and voiced.size > 0, f"max err {f0_err:.3f} Hz"),
    ]


def check_metrics() -> List[CheckResult]:
    rng = np.random.default_rng(0)
    t = np.arange(32000) / 32000
    x = sum(np.sin(2 * np.pi * 180 * h * t + rng.uniform(0, 6.28)) / h for h in range(1, 20))
    a = AudioClip(0.3 * x * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t) ** 2) / np.abs(x).max(), 32000)
    b = AudioClip(a.samples + 0.05 * rng.standard_normal(len(a)), 32000)
    same = stoi(a, a)
    gain = abs(stoi(a, AudioClip(3.0 * b.samples, 32000)) - stoi(a, b))
    torch.manual_seed(99)
    s = secs(a, a, SpeakerEncoder())
    return [
        CheckResult("stoi(a, a) = 1", abs(same - 1) <= 1e-6, f"{same:.8f}"),
        CheckResult("stoi gain invariance", gain <= 1e-6, f"diff {gain:.1e}"),
        CheckResult("secs(a, a) = 1", abs(s - 1) <= 1e-6, f"{s:.8f}"),
    ]


GROUPS = {
    "gradients": lambda: check_gradients(),
    "flow": check_flow,
    "losses": check_loss_anchors,
    "kl": lambda: [check_kl_monte_carlo()],
    "compression": check_compression,
    "retrieval": check_retrieval,
    "dsp": check_dsp,
    "metrics": check_metrics,
}


def run_all(groups: Sequence[str] = None) -> List[CheckResult]:
    nn.set_deterministic()
    out = []
    for name in groups or GROUPS:
        start = time.perf_counter()
        results = GROUPS[name]()
        if name == "gradients":
            elapsed = time.perf_counter() - start
            results.append(CheckResult("gradient suite under 60 s", elapsed < 60.0, f"{elapsed:.1f} s"))
        out.extend(results)
    return out


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}" for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
