"""Command-line interface: ``predhash <command> [options]``.

Commands
    gen-data        synthetic feature files plus a split manifest
    train           primary encoder/decoders (ssth-rt, ssth-rt+, ssth-rt++)
    distill         secondary encoder from a trained primary (la-reco, la-code)
    build-codebook  plain or duplicated (ssth-rt++) codebook for a split
    query           top-K for one feature file at an observation level
    stream-sim      replay a feature file clip by clip, one JSON line per clip
    eval            mAP@K over the query split for every observation level
    bench           search latency over random codebooks

Every command reads and checks all of its inputs before writing anything.
Exit codes: 0 success, 2 bad arguments, 3 missing input, 4 malformed file,
5 invalid configuration, 6 model / codebook / data mismatch.  Set
``PREDHASH_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import nn
from .data import (DatasetManifest, FeatureFormatError, SyntheticSpec, generate_synthetic, read_features,
                   read_manifest, write_dataset)
from .encoder import DecoderModel, EncoderModel, ModelFormatError, encode_sequence, load_model, save_model
from .evaluation import MethodBundle, emit_report, merge, sweep
from .index import (CodebookFormatError, WidthMismatchError, bench_search, build_codebook, load_codebook,
                    pack, random_codebook, save_codebook, search_distinct, session_open, session_push,
                    session_query)
from .training import (ALPHA_GRID, PRIMARY_REGIMES, SECONDARY_REGIMES, TrainingConfig, observed_length,
                       read_config, read_kv, train_primary, train_secondary, write_config)

log = logging.getLogger("predhash")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_MISMATCH = 6

REGIMES = PRIMARY_REGIMES + SECONDARY_REGIMES
ENCODER_FILE = "encoder.msh"
DECODER_FILE = "decoder.msh"


class CLIError(Exception):
    code = 1


class MissingInputError(CLIError):
    code = EXIT_MISSING


class ConfigError(CLIError):
    code = EXIT_CONFIG


class MismatchError(CLIError):
    code = EXIT_MISMATCH


# ------------------------------------------------------------------ parsing

def parse_alphas(text: str) -> tuple[float, ...]:
    """``"0.1..1.0"`` (step 0.1), ``"0.2..1.0:0.2"`` or ``"0.1,0.5,1.0"``."""
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (float(x) for x in span.split(".."))
            step = float(step) if step else 0.1
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step)) + 1
            grid = tuple(round(lo + i * step, 10) for i in range(n))
        else:
            grid = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse alpha grid {text!r}") from None
    if not grid or any(not 0 < a <= 1 for a in grid):
        raise argparse.ArgumentTypeError(f"alphas must lie in (0, 1], got {text!r}")
    return grid


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _ratios(text: str) -> tuple[float, float, float]:
    parts = tuple(float(x) for x in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="predhash", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, seed=True, out=True):
        sp.add_argument("--config", type=Path, help="key = value file; flags override it")
        if seed:
            sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--ratios", type=_ratios, default=(0.5, 0.45, 0.05), help="train,codebook,query")

    for name, regimes in (("train", PRIMARY_REGIMES), ("distill", SECONDARY_REGIMES)):
        sp = sub.add_parser(name, help=f"{name} an encoder")
        common(sp)
        sp.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
        sp.add_argument("--regime", choices=regimes)
        sp.add_argument("--bits", type=_positive)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=_positive)
        sp.add_argument("--alphas", type=parse_alphas)
        if name == "distill":
            sp.add_argument("--primary", type=Path, required=True, help="directory written by train")

    sp = sub.add_parser("build-codebook", help="hash a split into a codebook")
    common(sp, seed=False)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True, help="encoder file or directory")
    sp.add_argument("--split", default="codebook")
    sp.add_argument("--regime", choices=REGIMES, default="ssth-rt", help="ssth-rt++ builds duplicates")
    sp.add_argument("--alphas", type=parse_alphas, default=ALPHA_GRID)
    sp.add_argument("--bits", type=_positive, help="assert the encoder width")

    for name in ("query", "stream-sim"):
        sp = sub.add_parser(name, help="search with one feature file")
        sp.add_argument("--model", type=Path, required=True)
        sp.add_argument("--codebook", type=Path, required=True)
        sp.add_argument("--features", type=Path, required=True)
        sp.add_argument("--k", type=_positive, default=20)
        if name == "query":
            sp.add_argument("--alpha", type=float, default=1.0)

    sp = sub.add_parser("eval", help="mAP@K sweep over observation levels")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True, help="query encoder")
    sp.add_argument("--codebook", type=Path, required=True)
    sp.add_argument("--regime", choices=REGIMES, help="method name in the report")
    sp.add_argument("--method", help="free-form method name (overrides --regime)")
    sp.add_argument("--k", type=_positive, default=20)
    sp.add_argument("--alphas", type=parse_alphas, default=ALPHA_GRID)
    sp.add_argument("--format", choices=("csv", "json"))

    sp = sub.add_parser("bench", help="time Hamming ranking")
    common(sp, out=False)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--sizes", default="21250,42500", help="comma-separated codebook sizes")
    sp.add_argument("--bits", type=_positive, default=256)
    sp.add_argument("--k", type=_positive, default=20)
    sp.add_argument("--queries", type=_positive, default=100)
    return p


# ------------------------------------------------------------------ helpers

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _manifest(data: Path) -> DatasetManifest:
    path = data / "manifest.tsv" if data.is_dir() else data
    manifest = read_manifest(_require(path, "manifest"))
    manifest.validate()
    for e in manifest.entries:
        _require(manifest.resolve(e), f"feature file of video {e.video_id}")
    return manifest


def _split(manifest: DatasetManifest, name: str):
    seqs = manifest.load(name)
    if not seqs:
        raise ConfigError(f"split {name!r} of the manifest is empty")
    return seqs


def _model_path(path: Path) -> Path:
    return path / ENCODER_FILE if path.is_dir() else path


def _encoder(path: Path) -> EncoderModel:
    path = _model_path(path)
    model = load_model(_require(path, "encoder"))
    if not isinstance(model, EncoderModel):
        raise MismatchError(f"{path} holds a decoder, expected an encoder")
    return model


def _check_features(model: EncoderModel, seqs) -> None:
    dims = {s.n_features for s in seqs}
    if dims != {model.n_features}:
        raise MismatchError(f"data has {sorted(dims)} features per clip, model expects {model.n_features}")


def _check_bits(model: EncoderModel, bits: int | None) -> None:
    if bits is not None and bits != model.n_bits:
        raise MismatchError(f"--bits {bits} but the encoder produces {model.n_bits}-bit codes")


def _training_config(args, regime_default: str):
    overrides = dict(regime=args.regime, n_bits=args.bits, epochs=args.epochs, lr=args.lr,
                     batch_size=args.batch_size, alphas=args.alphas, seed=args.seed)
    try:
        if args.config is not None:
            names = {f.name for f in fields(TrainingConfig)}
            if "regime" not in read_kv(_require(args.config, "config"), names):
                overrides["regime"] = args.regime or regime_default
        else:
            overrides["regime"] = args.regime or regime_default
        return read_config(args.config, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _guard_inputs(out: Path, *inputs: Path) -> None:
    for p in inputs:
        if p is not None and out.resolve() in (p.resolve(), _model_path(p).resolve()):
            raise ConfigError(f"--out {out} would overwrite an input file")


def _emit(line: dict) -> None:
    print(json.dumps(line), flush=True)


def _hits(r) -> list:
    return [[int(v), int(d)] for v, d in zip(r.video_ids, r.distances)]


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    names = {f.name for f in fields(SyntheticSpec)}
    values = read_kv(_require(args.config, "config"), names) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = SyntheticSpec(**values)
        spec.validate()
        if abs(sum(args.ratios) - 1) > 1e-9 or min(args.ratios) < 0:
            raise ValueError(f"ratios must be non-negative and sum to 1, got {args.ratios}")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    manifest = write_dataset(generate_synthetic(spec), args.out, args.ratios)
    counts = {s: len(manifest.split_entries(s)) for s in ("train", "codebook", "query")}
    _emit({"out": str(args.out), "videos": len(manifest.entries), **counts})


def cmd_train(args) -> None:
    cfg = _training_config(args, "ssth-rt")
    if cfg.is_secondary:
        raise ConfigError(f"regime {cfg.regime} is a distillation regime; use 'distill'")
    train = _split(_manifest(args.data), "train")
    enc, dec, hist = train_primary(cfg, train, on_epoch=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    args.out.mkdir(parents=True, exist_ok=True)
    save_model(enc, args.out / ENCODER_FILE)
    save_model(dec, args.out / DECODER_FILE)
    hist.write_csv(args.out / "history.csv")
    write_config(cfg, args.out / "train.cfg")
    _emit({"out": str(args.out), "regime": cfg.regime, "n_bits": cfg.n_bits, "final_loss": hist.losses[-1]
           if hist.losses else None})


def cmd_distill(args) -> None:
    cfg = _training_config(args, "la-code")
    if not cfg.is_secondary:
        raise ConfigError(f"regime {cfg.regime} is not a distillation regime; use 'train'")
    primary = _encoder(_require(args.primary, "primary model"))
    decoders = None
    if cfg.regime == "la-reco":
        dec_path = _require(args.primary / DECODER_FILE if args.primary.is_dir() else
                            args.primary.with_name(DECODER_FILE), "primary decoder")
        decoders = load_model(dec_path)
        if not isinstance(decoders, DecoderModel) or decoders.n_bits != primary.n_bits:
            raise MismatchError(f"{dec_path} is not a decoder for this {primary.n_bits}-bit encoder")
    if cfg.n_bits != primary.n_bits:
        if args.bits is not None:
            raise MismatchError(f"--bits {args.bits} but the primary produces {primary.n_bits}-bit codes")
        cfg = replace(cfg, n_bits=primary.n_bits)
    train = _split(_manifest(args.data), "train")
    _check_features(primary, train)
    sec, hist = train_secondary(cfg.regime, primary, decoders, cfg, train,
                                on_epoch=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    args.out.mkdir(parents=True, exist_ok=True)
    save_model(sec, args.out / ENCODER_FILE)
    hist.write_csv(args.out / "history.csv")
    write_config(cfg, args.out / "train.cfg")
    _emit({"out": str(args.out), "regime": cfg.regime, "n_bits": cfg.n_bits, "final_loss": hist.losses[-1]
           if hist.losses else None})


def cmd_build_codebook(args) -> None:
    enc = _encoder(args.model)
    _check_bits(enc, args.bits)
    _guard_inputs(args.out, args.model, args.data)
    database = _split(_manifest(args.data), args.split)
    _check_features(enc, database)
    alphas = args.alphas if args.regime == "ssth-rt++" else None
    cb = build_codebook(enc, database, alphas)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_codebook(cb, args.out)
    _emit({"out": str(args.out), "entries": len(cb), "videos": len(database), "n_bits": cb.n_bits,
           "duplicated": cb.duplicated})


def _query_inputs(args):
    enc = _encoder(args.model)
    cb = load_codebook(_require(args.codebook, "codebook"))
    if cb.n_bits != enc.n_bits:
        raise MismatchError(f"codebook holds {cb.n_bits}-bit codes, encoder produces {enc.n_bits}")
    seq = read_features(_require(args.features, "feature file"))
    _check_features(enc, [seq])
    return enc, cb, seq


def cmd_query(args) -> None:
    if not 0 < args.alpha <= 1:
        raise ConfigError(f"--alpha must lie in (0, 1], got {args.alpha}")
    enc, cb, seq = _query_inputs(args)
    n = observed_length(len(seq), args.alpha)
    code = encode_sequence(enc, seq.clips[:n])[0]
    r = search_distinct(cb, pack(code), args.k, query_id=seq.video_id)
    _emit({"query": seq.video_id, "clips": n, "alpha": args.alpha, "hits": _hits(r)})


def cmd_stream_sim(args) -> None:
    enc, cb, seq = _query_inputs(args)
    s = session_open(enc)
    T = len(seq)
    for t, f in enumerate(seq.clips, start=1):
        session_push(s, f)
        r = session_query(s, cb, args.k)
        _emit({"clip": t, "elapsed": t / T, "hits": _hits(r)})


def cmd_eval(args) -> None:
    enc = _encoder(args.model)
    cb = load_codebook(_require(args.codebook, "codebook"))
    if cb.n_bits != enc.n_bits:
        raise MismatchError(f"codebook holds {cb.n_bits}-bit codes, encoder produces {enc.n_bits}")
    _guard_inputs(args.out, args.model, args.codebook, args.data)
    manifest = _manifest(args.data)
    queries = _split(manifest, "query")
    _check_features(enc, queries)
    labels = {e.video_id: e.label for e in manifest.entries}
    unknown = {int(v) for v in cb.video_ids} - set(labels)
    if unknown:
        raise MismatchError(f"codebook references {len(unknown)} videos missing from the manifest")
    method = args.method or args.regime or "method"
    report = sweep(MethodBundle(method, enc, cb, labels), queries, args.alphas, args.k)
    report = merge(report, seed=args.seed, dataset=str(args.data))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(report, args.out, args.format)
    for row in report.rows:
        _emit({"method": row.method, "n_bits": row.n_bits, "alpha": row.alpha, "k": row.k, "map": row.map})


def cmd_bench(args) -> None:
    try:
        sizes = [int(x) for x in args.sizes.split(",")]
        if any(s < 1 for s in sizes):
            raise ValueError
    except ValueError:
        raise ConfigError(f"--sizes must be positive integers, got {args.sizes!r}") from None
    seed = 0 if args.seed is None else args.seed
    reports = []
    for size in sizes:
        rep = bench_search(random_codebook(size, args.bits, seed), args.queries, args.k, seed)
        reports.append(rep.as_dict())
        _emit(rep.as_dict())
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(reports, indent=2) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "distill": cmd_distill,
    "build-codebook": cmd_build_codebook, "query": cmd_query, "stream-sim": cmd_stream_sim,
    "eval": cmd_eval, "bench": cmd_bench,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CLIError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, (FeatureFormatError, ModelFormatError, CodebookFormatError)):
        return EXIT_FORMAT
    if isinstance(exc, (WidthMismatchError, nn.ConfigurationError)):
        return EXIT_MISMATCH
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("PREDHASH_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        COMMANDS[args.command](args)
    except BrokenPipeError:
        # a closed downstream pipe (e.g. ``| head``) is not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except (CLIError, OSError, ValueError) as exc:
        print(f"predhash {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
