import numpy as np
import pytest

from zsvc.audio_io import read_wav
from zsvc.cli import main
from zsvc import cli
from zsvc.content import ContentFeatures, load_codes, load_features, save_features
from zsvc.errors import NumericalError
from zsvc.speaker import EmbeddingStore

TINY_CFG = """# tiny run
seed = 3
steps = 2
segment_frames = 8
hidden = 8
d_z = 4
speaker_dim = 8
decoder_channels = 16
pitch_embed = 4
content_dim = 6
disc_channels = 4
flow_blocks = 1
"""


@pytest.fixture(scope="module")
def clips(tmp_path_factory):
    d = tmp_path_factory.mktemp("clips")
    assert main(["synth", "--out", str(d), "--speakers", "2", "--clips", "1", "--seconds", "0.4", "--seed", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(clips, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = d / "run.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["train", "--config", str(cfg), "--data", str(clips), "--out", str(d / "ckpt")]) == 0
    return d


def test_features_extract_round_trip(tmp_path, clips):
    wav = sorted(clips.iterdir())[0]
    out = tmp_path / "f.svcf"
    assert main(["features", "extract", "--in", str(wav), "--seed", "4", "--dim", "8", "--out", str(out)]) == 0
    feats = load_features(out)
    assert feats.dim == 8
    again = tmp_path / "g.svcf"
    main(["features", "extract", "--in", str(wav), "--seed", "4", "--dim", "8", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_missing_input_is_io_error(tmp_path):
    assert main(["features", "extract", "--in", str(tmp_path / "nope.wav"), "--out", str(tmp_path / "f")]) == 2


def test_usage_errors():
    assert main([]) == 1
    assert main(["features", "extract"]) == 1
    assert main(["nonsense"]) == 1


def test_kmeans_fit_and_compress_toy(tmp_path, capsys):
    data = np.concatenate([np.zeros((10, 2)), np.full((10, 2), 10.0)])
    save_features(ContentFeatures(data), tmp_path / "toy.svcf")
    assert main(["kmeans", "fit", "--in", str(tmp_path / "toy.svcf"), "--k", "2", "--out",
                 str(tmp_path / "cb.svcf")]) == 0
    assert main(["features", "compress", "--in", str(tmp_path / "toy.svcf"), "--codebook", str(tmp_path / "cb.svcf"),
                 "--mode", "tensor", "--out", str(tmp_path / "q.svcf")]) == 0
    np.testing.assert_array_equal(load_features(tmp_path / "q.svcf").frames, data)
    assert main(["features", "compress", "--in", str(tmp_path / "toy.svcf"), "--codebook", str(tmp_path / "cb.svcf"),
                 "--mode", "codes", "--out", str(tmp_path / "c.svcf")]) == 0
    codes = load_codes(tmp_path / "c.svcf")[:, 0]
    assert codes.dtype.kind == "i"
    assert len(set(codes[:10])) == 1 and len(set(codes[10:])) == 1 and codes[0] != codes[10]


def test_compress_dim_mismatch_exits_3(tmp_path):
    save_features(ContentFeatures(np.random.default_rng(0).standard_normal((20, 3))), tmp_path / "a.svcf")
    save_features(ContentFeatures(np.random.default_rng(1).standard_normal((20, 4))), tmp_path / "b.svcf")
    main(["kmeans", "fit", "--in", str(tmp_path / "a.svcf"), "--k", "2", "--out", str(tmp_path / "cb.svcf")])
    assert main(["features", "compress", "--in", str(tmp_path / "b.svcf"), "--codebook", str(tmp_path / "cb.svcf"),
                 "--out", str(tmp_path / "q.svcf")]) == 3


def test_rvq_fit_writes_stages_and_manifest(tmp_path):
    save_features(ContentFeatures(np.random.default_rng(0).standard_normal((50, 3))), tmp_path / "a.svcf")
    manifest = tmp_path / "rvq.txt"
    assert main(["rvq", "fit", "--in", str(tmp_path / "a.svcf"), "--stages", "3", "--codes", "4", "--out",
                 str(manifest)]) == 0
    names = manifest.read_text().split()
    assert len(names) == 3 and all((tmp_path / n).exists() for n in names)
    assert main(["features", "compress", "--in", str(tmp_path / "a.svcf"), "--rvq", str(manifest), "--mode", "codes",
                 "--out", str(tmp_path / "c.svcf")]) == 0
    assert load_codes(tmp_path / "c.svcf").shape == (50, 3)


def test_store_build(tmp_path, clips):
    enc = tmp_path / "enc.svck"
    assert main(["encoder", "init", "--seed", "1", "--out", str(enc)]) == 0
    assert main(["store", "build", "--dir", str(clips), "--encoder", str(enc), "--out", str(tmp_path / "db")]) == 0
    store = EmbeddingStore.load(tmp_path / "db")
    assert store.ids == sorted(p.stem for p in clips.iterdir())
    first = (tmp_path / "db.svcf").read_bytes()
    main(["store", "build", "--dir", str(clips), "--encoder", str(enc), "--out", str(tmp_path / "db")])
    assert (tmp_path / "db.svcf").read_bytes() == first
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["store", "build", "--dir", str(empty), "--encoder", str(enc), "--out", str(tmp_path / "x")]) == 3


def test_bad_config_key_exits_3_naming_key(tmp_path, clips, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stepz = 3\n")
    assert main(["train", "--config", str(cfg), "--data", str(clips), "--out", str(tmp_path / "o")]) == 3
    assert "stepz" in capsys.readouterr().err


def test_train_log_and_reproducible(trained, clips, tmp_path):
    lines = (trained / "ckpt" / "train_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 2
    assert main(["train", "--config", str(trained / "run.cfg"), "--data", str(clips), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final.svck").read_bytes() == (trained / "ckpt" / "final.svck").read_bytes()


def test_convert_and_retrieval_fixed_point(trained, clips, tmp_path):
    wavs = sorted(clips.iterdir())
    model = str(trained / "ckpt" / "final.svck")
    plain, again, retr = tmp_path / "a.wav", tmp_path / "b.wav", tmp_path / "c.wav"
    base = ["convert", "--source", str(wavs[0]), "--reference", str(wavs[1]), "--model", model, "--seed", "5"]
    assert main(base + ["--out", str(plain)]) == 0
    assert main(base + ["--out", str(again)]) == 0
    assert plain.read_bytes() == again.read_bytes()
    src = read_wav(wavs[0])
    assert abs(len(read_wav(plain)) - len(src)) <= 320
    copies = tmp_path / "copies"
    copies.mkdir()
    for i in range(3):
        (copies / f"ref{i}.wav").write_bytes(wavs[1].read_bytes())
    assert main(["store", "build", "--dir", str(copies), "--encoder", model, "--out", str(tmp_path / "db")]) == 0
    assert main(base + ["--retrieval", "--store", str(tmp_path / "db"), "--out", str(retr)]) == 0
    assert retr.read_bytes() == plain.read_bytes()
    assert main(base + ["--retrieval", "--out", str(retr)]) == 1


def test_eval_identical_clip(tmp_path, clips, capsys):
    wavs = sorted(clips.iterdir())
    enc = tmp_path / "enc.svck"
    main(["encoder", "init", "--seed", "9", "--out", str(enc)])
    capsys.readouterr()
    assert main(["eval", "--converted", str(wavs[0]), "--source", str(wavs[0]), "--reference", str(wavs[1]),
                 "--encoder", str(enc)]) == 0
    report = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert float(report["secs_vs_source"]) == pytest.approx(1.0, abs=1e-6)
    assert float(report["stoi_vs_source"]) == pytest.approx(1.0, abs=1e-6)
    assert main(["eval", "--converted", str(wavs[0]), "--source", str(wavs[0]), "--reference", str(wavs[1]),
                 "--encoder", str(tmp_path / "missing.svck")]) == 2


def test_verify_subset_passes(capsys):
    assert main(["verify", "--only", "dsp", "retrieval"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_numerical_abort_exits_4(monkeypatch, clips, tmp_path, capsys):
    def boom(*args, **kwargs):
        raise NumericalError("l_mel", 17)
    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--data", str(clips), "--out", str(tmp_path)]) == 4
    assert "l_mel" in capsys.readouterr().err
