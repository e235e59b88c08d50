import numpy as np
import pytest
import torch

from zsvc.dsp import MelSpectrogram
from zsvc.errors import ValidationError
from zsvc.speaker import (EmbeddingStore, SpeakerEmbedding, SpeakerEncoder, build_store, encode_speaker,
                          retrieval_average, top_k)

from conftest import tone


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return SpeakerEncoder()


def rand_mel(seed, t=40):
    return MelSpectrogram(np.random.default_rng(seed).normal(-4, 2, (t, 80)))


def unit(v):
    return SpeakerEmbedding.normalized(v)


def test_encoder_output_unit_norm_and_permutation_invariant(enc):
    mel = rand_mel(0)
    e = encode_speaker(mel, enc)
    assert e.dim == 256 and abs(np.linalg.norm(e.vector) - 1) <= 1e-6
    perm = np.random.default_rng(1).permutation(mel.n_frames)
    ep = encode_speaker(MelSpectrogram(mel.frames[perm]), enc)
    np.testing.assert_allclose(ep.vector, e.vector, atol=1e-6)


def test_encoder_non_degenerate(enc):
    a, b = encode_speaker(rand_mel(2), enc), encode_speaker(rand_mel(3), enc)
    assert a.vector @ b.vector < 1 - 1e-6


def test_encoder_rejects_short_or_wrong_bands(enc):
    with pytest.raises(ValidationError):
        encode_speaker(rand_mel(0, t=1), enc)
    with pytest.raises(ValidationError):
        encode_speaker(MelSpectrogram(np.zeros((10, 40))), enc)


def test_frozen_flag_controls_grad(enc):
    enc.frozen = True
    assert not any(p.requires_grad for p in enc.parameters())
    enc.frozen = False
    assert all(p.requires_grad for p in enc.parameters())


def test_build_store(enc):
    assert len(build_store([], enc)) == 0
    items = [(f"s{i}", tone(200 + 50 * i, 0.3)) for i in range(3)]
    store = build_store(items, enc)
    assert store.ids == ["s0", "s1", "s2"]
    again = build_store(items, enc)
    assert np.array_equal(store.matrix, again.matrix)
    with pytest.raises(ValidationError):
        build_store(items + [("s0", tone(100, 0.3))], enc)


def test_store_files_roundtrip(tmp_path, enc):
    store = build_store([("a", tone(220, 0.3)), ("b", tone(330, 0.3))], enc)
    store.save(tmp_path / "db")
    assert (tmp_path / "db.ids").read_text() == "a\nb\n"
    back = EmbeddingStore.load(tmp_path / "db")
    assert back.ids == store.ids and np.array_equal(back.matrix, store.matrix)


def test_top_k_basic():
    e1, e2 = np.eye(4)[0], np.eye(4)[1]
    store = EmbeddingStore(["e1", "e2"], np.stack([e1, e2]))
    assert top_k(store, SpeakerEmbedding(e1), 2) == [("e1", 1.0), ("e2", 0.0)]
    assert len(top_k(store, SpeakerEmbedding(e1), 10)) == 2
    with pytest.raises(ValidationError):
        top_k(EmbeddingStore(), SpeakerEmbedding(e1), 1)


def test_top_k_ties_keep_insertion_order():
    v = np.eye(3)[0]
    store = EmbeddingStore(["x", "y", "z"], np.stack([np.eye(3)[1], v, v]))
    assert [i for i, _ in top_k(store, SpeakerEmbedding(v), 3)] == ["y", "z", "x"]


@pytest.mark.parametrize("k", [1, 3, 10])
def test_top_k_matches_full_sort(k):
    rng = np.random.default_rng(42)
    m = rng.standard_normal((1000, 16))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    store = EmbeddingStore([f"id{i}" for i in range(1000)], m)
    q = unit(rng.standard_normal(16))
    scored = [(-float(np.dot(m[i], q.vector)), i) for i in range(1000)]
    oracle = [f"id{i}" for _, i in sorted(scored)[:k]]
    assert [i for i, _ in top_k(store, q, k)] == oracle


def test_retrieval_average_fixed_point():
    q = unit(np.arange(1.0, 9.0))
    store = EmbeddingStore(["a", "b", "c"], np.stack([q.vector] * 3))
    np.testing.assert_allclose(retrieval_average(q, store).vector, q.vector, atol=1e-6)


def test_retrieval_average_closed_form():
    store = EmbeddingStore(["a", "b", "c"], np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
    out = retrieval_average(SpeakerEmbedding(np.array([1.0, 0.0])), store, 3)
    np.testing.assert_allclose(out.vector, [np.sqrt(2) / 2, np.sqrt(2) / 2], atol=1e-6)


def test_retrieval_average_small_store_and_cone():
    rng = np.random.default_rng(3)
    m = rng.random((2, 5))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    store = EmbeddingStore(["a", "b"], m)
    q = unit(rng.random(5))
    out = retrieval_average(q, store, 3)
    expected = (q.vector + m[0] + m[1]) / 3
    np.testing.assert_allclose(out.vector, expected / np.linalg.norm(expected), atol=1e-12)
    assert abs(np.linalg.norm(out.vector) - 1) <= 1e-6
    # non-negative combination of non-negative inputs stays non-negative
    assert np.all(out.vector >= 0)


def test_retrieval_average_cancellation():
    store = EmbeddingStore(["neg"], np.array([[-1.0, 0.0]]))
    with pytest.raises(ValidationError):
        retrieval_average(SpeakerEmbedding(np.array([1.0, 0.0])), store, 1)
