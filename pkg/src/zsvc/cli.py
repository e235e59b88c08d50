"""``zsvc`` command line: features, codebooks, speaker store, training, conversion, evaluation, verification.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical abort
(``verify`` also exits 4 when an invariant fails).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .audio_io import read_wav, write_wav
from .checkpoint import load_tensors, save_tensors
from .config import TrainConfig, load_config
from .content import (ContentProvider, KMeansCodebook, Mode, ResidualCodebooks, kmeans_fit, kmeans_quantize,
                      load_features, load_matrix, rvq_encode, rvq_fit, save_codes, save_features, save_matrix)
from .dsp import SpectroConfig, log_mel
from .errors import FormatError, NumericalError, ValidationError
from .metrics import evaluate
from .nn import set_deterministic
from .pipeline import ConvertOptions, convert
from .speaker import EmbeddingStore, SpeakerEncoder, build_store
from .training import Utterance, load_checkpoint, synthetic_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3, 4

log = logging.getLogger("zsvc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- file helpers ----------------------------------------------------------

ENCODER_PREFIXES = ("enc.", "gen.speaker.")


def save_encoder(enc: SpeakerEncoder, path) -> None:
    save_tensors({f"enc.{k}": v.detach().numpy() for k, v in enc.state_dict().items()}, path)


def load_encoder(path) -> SpeakerEncoder:
    """A standalone encoder file or the speaker encoder inside a training checkpoint."""
    tensors = load_tensors(path)
    for prefix in ENCODER_PREFIXES:
        if f"{prefix}proj_in.weight" in tensors:
            break
    else:
        raise FormatError(f"{path} holds no speaker encoder", name="enc.proj_in.weight")
    w_in, w_out = tensors[f"{prefix}proj_in.weight"], tensors[f"{prefix}proj_out.weight"]
    enc = SpeakerEncoder(n_mels=w_in.shape[1] // 2, dim=w_out.shape[0], hidden=w_in.shape[0])
    sd = {}
    for name in enc.state_dict():
        if f"{prefix}{name}" not in tensors:
            raise FormatError("encoder tensor missing", name=f"{prefix}{name}")
        sd[name] = torch.as_tensor(tensors[f"{prefix}{name}"], dtype=torch.get_default_dtype())
    enc.load_state_dict(sd)
    enc.frozen = True
    return enc


def wav_files(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")


def load_rvq(manifest) -> ResidualCodebooks:
    manifest = Path(manifest)
    names = [l.strip() for l in manifest.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not names:
        raise ValidationError(f"RVQ manifest {manifest} lists no stages")
    return ResidualCodebooks([load_matrix(manifest.parent / n).astype(np.float64) for n in names])


def save_rvq(rvq: ResidualCodebooks, manifest) -> List[Path]:
    manifest = Path(manifest)
    paths = []
    for i, stage in enumerate(rvq.stages):
        p = manifest.with_name(f"{manifest.stem}.stage{i}.svcf")
        save_matrix(stage, p)
        paths.append(p)
    manifest.write_text("".join(f"{p.name}\n" for p in paths), encoding="utf-8")
    return paths


def _stack_features(paths: Sequence[str]) -> np.ndarray:
    return np.concatenate([load_features(p).frames for p in paths], axis=0)


# --- commands --------------------------------------------------------------

def cmd_features_extract(args) -> int:
    clip = read_wav(args.input)
    provider = ContentProvider.parse(args.provider, args.seed, args.dim)
    feats = provider.features(log_mel(clip, SpectroConfig(sample_rate=clip.sample_rate)), Path(args.input).stem)
    save_features(feats, args.out)
    print(f"{feats.n_frames}x{feats.dim}")
    return EXIT_OK


def cmd_features_compress(args) -> int:
    if (args.codebook is None) == (args.rvq is None):
        raise UsageError("features compress: give exactly one of --codebook or --rvq")
    feats = load_features(args.input)
    mode = Mode.parse(args.mode)
    if args.codebook:
        out = kmeans_quantize(feats, KMeansCodebook(load_matrix(args.codebook).astype(np.float64)), mode)
    else:
        out = rvq_encode(feats, load_rvq(args.rvq), mode)
    if mode is Mode.CODES:
        codes = np.asarray(out)
        save_codes(codes.T if codes.ndim == 2 else codes, args.out)
        print(f"codes {codes.shape[-1]} frames x {1 if codes.ndim == 1 else codes.shape[0]} streams")
    else:
        save_features(out, args.out)
        print(f"{out.n_frames}x{out.dim}")
    return EXIT_OK


def cmd_kmeans_fit(args) -> int:
    cb = kmeans_fit(_stack_features(args.input), args.k, args.iters, args.seed)
    save_matrix(cb.centroids, args.out)
    print(f"k={cb.k} dim={cb.dim} iterations={cb.iterations} inertia={cb.inertia:.6g}")
    return EXIT_OK


def cmd_rvq_fit(args) -> int:
    rvq = rvq_fit(_stack_features(args.input), args.stages, args.codes, args.iters, args.seed)
    paths = save_rvq(rvq, args.out)
    energy = " ".join(f"{e:.6g}" for e in rvq.residual_energy)
    print(f"stages={len(paths)} codes={args.codes} residual_energy={energy}")
    return EXIT_OK


def cmd_encoder_init(args) -> int:
    torch.manual_seed(args.seed)
    save_encoder(SpeakerEncoder(dim=args.dim), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_store_build(args) -> int:
    enc = load_encoder(args.encoder)
    files = wav_files(args.dir)
    if not files:
        raise ValidationError(f"no WAV files in {args.dir}")
    stems = [p.stem for p in files]
    if len(set(stems)) != len(stems):
        raise ValidationError("duplicate file stems")
    store = build_store([(p.stem, read_wav(p)) for p in files], enc)
    store.save(args.out)
    print(f"{len(store)} embeddings x {store.matrix.shape[1]}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = synthetic_dataset(args.speakers, args.clips, args.seconds, args.seed)
    for u in items:
        write_wav(u.clip, out / f"{u.name}.wav")
    print(f"{len(items)} clips in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if overrides:
        import dataclasses
        cfg = dataclasses.replace(cfg, **overrides)
    files = wav_files(args.data)
    if not files:
        raise ValidationError(f"no WAV files in {args.data}")
    dataset = [Utterance(p.stem, p.stem.split("_")[0], read_wav(p)) for p in files]
    final = train(dataset, cfg, args.out, resume=args.resume)
    print(f"wrote {final}")
    return EXIT_OK


def cmd_convert(args) -> int:
    if args.retrieval and not args.store:
        raise UsageError("convert: --retrieval needs --store")
    state = load_checkpoint(args.model)
    cfg = state.cfg
    opts = ConvertOptions(retrieval=args.retrieval, k=args.topk, temperature=args.temperature,
                          transpose_semitones=args.transpose, seed=args.seed, f0_min=cfg.f0_min, f0_max=cfg.f0_max)
    store = EmbeddingStore.load(args.store) if args.retrieval else None
    source, reference = read_wav(args.source), read_wav(args.reference)
    state.model.eval()
    out = convert(source, reference, state.model, state.model.speaker, state.pipeline, opts, store, cfg.spectro)
    write_wav(out, args.out)
    print(f"wrote {args.out} ({len(out)} samples at {out.sample_rate} Hz)")
    return EXIT_OK


def cmd_eval(args) -> int:
    enc = load_encoder(args.encoder)
    report = evaluate(read_wav(args.converted), read_wav(args.source), read_wav(args.reference), enc)
    sys.stdout.write(report.to_text())
    if args.summary:
        from .metrics import write_summary
        write_summary([(Path(args.converted).stem, report)], args.summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import GROUPS, format_table, run_all
    groups = args.only or list(GROUPS)
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise UsageError(f"verify: unknown group(s) {unknown}; choose from {list(GROUPS)}")
    results = run_all(groups)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zsvc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    feats = sub.add_parser("features").add_subparsers(dest="action", parser_class=_Parser, required=True)
    x = feats.add_parser("extract", help="content features for one WAV")
    x.add_argument("--in", dest="input", required=True)
    x.add_argument("--provider", default="synthetic", help="synthetic | file:PATH")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--dim", type=int, default=64)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_features_extract)
    c = feats.add_parser("compress", help="quantize features with a k-means or RVQ codebook")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--codebook")
    c.add_argument("--rvq", help="RVQ manifest")
    c.add_argument("--mode", choices=["tensor", "codes"], default="tensor")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_features_compress)

    km = sub.add_parser("kmeans").add_subparsers(dest="action", parser_class=_Parser, required=True)
    k = km.add_parser("fit")
    k.add_argument("--in", dest="input", nargs="+", required=True)
    k.add_argument("--k", type=int, default=900)
    k.add_argument("--iters", type=int, default=100)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kmeans_fit)

    rv = sub.add_parser("rvq").add_subparsers(dest="action", parser_class=_Parser, required=True)
    r = rv.add_parser("fit")
    r.add_argument("--in", dest="input", nargs="+", required=True)
    r.add_argument("--stages", type=int, default=4)
    r.add_argument("--codes", type=int, default=64)
    r.add_argument("--iters", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="manifest path; stages go next to it")
    r.set_defaults(func=cmd_rvq_fit)

    en = sub.add_parser("encoder").add_subparsers(dest="action", parser_class=_Parser, required=True)
    e = en.add_parser("init", help="write a seeded speaker encoder (e.g. an independent SECS evaluator)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dim", type=int, default=256)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encoder_init)

    st = sub.add_parser("store").add_subparsers(dest="action", parser_class=_Parser, required=True)
    s = st.add_parser("build")
    s.add_argument("--dir", required=True)
    s.add_argument("--encoder", required=True, help="encoder file or training checkpoint")
    s.add_argument("--out", required=True, help="stem for <out>.svcf and <out>.ids")
    s.set_defaults(func=cmd_store_build)

    sy = sub.add_parser("synth", help="write the bundled synthetic dataset as WAV files")
    sy.add_argument("--out", required=True)
    sy.add_argument("--speakers", type=int, default=4)
    sy.add_argument("--clips", type=int, default=4)
    sy.add_argument("--seconds", type=float, default=1.0)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(func=cmd_synth)

    t = sub.add_parser("train")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override the config's step count")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    cv = sub.add_parser("convert")
    cv.add_argument("--source", required=True)
    cv.add_argument("--reference", required=True)
    cv.add_argument("--model", required=True)
    cv.add_argument("--retrieval", action="store_true")
    cv.add_argument("--store")
    cv.add_argument("--topk", type=int, default=3)
    cv.add_argument("--transpose", type=float, default=0.0)
    cv.add_argument("--temperature", type=float, default=0.8)
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--out", required=True)
    cv.set_defaults(func=cmd_convert)

    ev = sub.add_parser("eval")
    ev.add_argument("--converted", required=True)
    ev.add_argument("--source", required=True)
    ev.add_argument("--reference", required=True)
    ev.add_argument("--encoder", required=True)
    ev.add_argument("--summary", help="also write a CSV summary")
    ev.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the invariant suite and print a pass/fail table")
    v.add_argument("--only", nargs="+", help="subset of check groups")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    set_deterministic()
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
