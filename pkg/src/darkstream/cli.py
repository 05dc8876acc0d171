"""Command-line entry point: ``darkstream <command> [flags]``.

Exit codes: 0 success, 1 tolerance breach (``compare``), 2 bad flags or
missing files, 3 unreadable or inconsistent files, 4 no acceptable
pseudo-speaker within ``--max-tries``.

Every command writes its outputs to a temporary file and renames it into
place, so a failing run never leaves a partial artifact behind.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .anonymizer import (
    Pipeline,
    PipelineConfig,
    config_from_mapping,
    read_config,
    read_embedding,
    read_embeddings_dir,
    write_config,
    write_embedding,
)
from .audio import AudioBuffer, read_wav, write_wav
from .encoder import fit_kmeans, load_codebook
from .errors import DarkStreamError, ExhaustedTries, FormatError
from .gan import GanConfig, init_gan, load_gan, sample_pseudo_speaker, save_gan
from .metrics import compute_eer, read_scores, report_text
from .streaming import latency_report, measure_latency, run_stream, timed_stream
from .weights import init_random, load_weights, save_weights

log = logging.getLogger("darkstream")

EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, EXIT_FORMAT, EXIT_EXHAUSTED = 0, 1, 2, 3, 4
BENCH_LA_MS = (0, 140, 280)


class UsageError(Exception):
    """Bad flag combination or missing input file."""


# -- helpers --------------------------------------------------------------------

def _existing(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _rows(config: PipelineConfig) -> dict:
    return dict(line.split("=", 1) for line in config.to_text().splitlines())


def _pipeline_config(args) -> PipelineConfig:
    """Config file (if any) overridden by explicit flags."""
    cfg = read_config(_existing(args.config, "--config")) if args.config else PipelineConfig()
    kv = {}
    for key in ("variant", "cl", "la_ms", "chunk_ms"):
        value = getattr(args, key, None)
        if value is not None:
            kv[key] = str(value)
    if getattr(args, "use_kmeans", False):
        kv["use_kmeans"] = "on"
    return config_from_mapping({**_rows(cfg), **kv})


def _load_pipeline(args, config=None) -> Pipeline:
    config = config or _pipeline_config(args)
    weights = load_weights(_existing(args.weights, "--weights"))
    codebook = load_codebook(_existing(args.kmeans, "--kmeans")) if getattr(args, "kmeans", None) else None
    return Pipeline(config, weights, codebook)


def _resolve_target(args, spk_dim):
    if args.target_emb:
        return read_embedding(_existing(args.target_emb, "--target-emb"), spk_dim)
    if args.gan_weights:
        params = load_gan(_existing(args.gan_weights, "--gan-weights"))
        sources = read_embeddings_dir(_existing(args.sources_dir, "--sources-dir"), spk_dim)
        if not sources:
            raise UsageError(f"no .emb files in {args.sources_dir}")
        emb, rejected = sample_pseudo_speaker(params, sources, args.threshold, args.max_tries, args.seed)
        log.info("pseudo-speaker accepted after %d rejections", rejected)
        return emb
    raise UsageError("--target-emb or --gan-weights with --sources-dir is required")


def _write_wav(path, samples):
    tmp = Path(path).with_name(f".{Path(path).name}.tmp")
    try:
        write_wav(tmp, AudioBuffer(samples))
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


# -- commands ---------------------------------------------------------------------

def cmd_anonymize(args) -> int:
    _existing(args.in_path, "--in")
    if not args.out:
        raise UsageError("--out is required")
    pipe = _load_pipeline(args)
    buffer = read_wav(args.in_path)
    target = _resolve_target(args, pipe.config.spk_dim)
    out, per_chunk, tail = timed_stream(pipe, buffer, pipe.config.chunk_ms, target)
    _write_wav(args.out, out)
    if args.report:
        t0 = time.perf_counter()
        pipe.forward(buffer.samples, target)
        offline = time.perf_counter() - t0
        rep = latency_report(pipe.config.chunk_ms, pipe.config.la_ms, per_chunk, tail, offline, buffer.duration)
        print(rep.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    buffer = read_wav(_existing(args.in_path, "--in"))
    base = _pipeline_config(args)
    weights = load_weights(_existing(args.weights, "--weights"))
    codebook = load_codebook(_existing(args.kmeans, "--kmeans")) if args.kmeans else None
    rows = []
    for la in BENCH_LA_MS:
        cfg = config_from_mapping({**_rows(base), "la_ms": str(la)})
        rep = measure_latency(Pipeline(cfg, weights, codebook), buffer, cfg.chunk_ms)
        rows.append(rep)
        if args.report:
            print(rep.to_text())
    print(f"{'la_ms':>6} {'algorithmic_ms':>15} {'compute_ms':>11} {'total_ms':>9} {'rtf':>7}")
    for r in rows:
        print(f"{r.lookahead_ms:>6} {r.algorithmic_ms:>15} {r.compute_ms['mean']:>11.2f} "
              f"{r.total_ms:>9.2f} {r.rtf:>7.3f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    buffer = read_wav(_existing(args.in_path, "--in"))
    pipe = _load_pipeline(args)
    target = read_embedding(_existing(args.target_emb, "--target-emb"), pipe.config.spk_dim) if args.target_emb else None
    offline = pipe.forward(buffer.samples, target)
    streamed = run_stream(pipe, buffer.samples, pipe.config.chunk_ms, target)
    diff = float(np.max(np.abs(offline - streamed))) if offline.size else 0.0
    ok = diff <= args.tolerance
    print(f"max_abs_diff {diff:.3e} tolerance {args.tolerance:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def _frames_from(path, args):
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    wavs = sorted(p.glob("*.wav")) if p.is_dir() else [p]
    if not wavs:
        raise UsageError(f"no .wav files in {p}")
    pipe = _load_pipeline(args, _pipeline_config(args).replace(use_kmeans=False))
    return np.concatenate([pipe.encoder.forward(read_wav(w).samples) for w in wavs])


def cmd_fit_kmeans(args) -> int:
    src = _existing(args.in_path, "--in")
    if not args.out:
        raise UsageError("--out is required")
    frames = _frames_from(src, args)
    book = fit_kmeans(frames, k=args.k, iterations=args.iterations, seed=args.seed)
    save_weights(book.to_bundle(), args.out)
    print(f"k {book.k} frames {len(frames)} iterations {len(book.distortion)} "
          f"distortion {book.distortion[-1] if book.distortion else float('nan'):.6g}")
    return EXIT_OK


def cmd_sample_speaker(args) -> int:
    params = load_gan(_existing(args.gan_weights, "--gan-weights"))
    if not args.out:
        raise UsageError("--out is required")
    dim = params["gan.gen.out.weight"].shape[0]
    sources = read_embeddings_dir(_existing(args.sources_dir, "--sources-dir"), dim)
    if not sources:
        raise UsageError(f"no .emb files in {args.sources_dir}")
    emb, rejected = sample_pseudo_speaker(params, sources, args.threshold, args.max_tries, args.seed)
    write_embedding(args.out, emb)
    print(f"accepted after {rejected} rejections")
    return EXIT_OK


def cmd_eer(args) -> int:
    scores = read_scores(_existing(args.scores, "--scores"))
    eer, threshold = compute_eer(scores)
    print(f"EER {eer:.2f}% threshold {threshold:.6g}")
    if args.report:
        print(report_text(eer_percent=eer, threshold=threshold,
                          genuine=int(scores.genuine.size), impostor=int(scores.impostor.size)))
    return EXIT_OK


def cmd_init_weights(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    if args.kind == "gan":
        cfg = GanConfig.toy() if args.gan_size == "toy" else GanConfig()
        save_gan(init_gan(cfg, args.seed), args.out)
        return EXIT_OK
    cfg = _pipeline_config(args)
    save_weights(init_random(cfg, args.seed), args.out)
    if args.config_out:
        write_config(args.config_out, cfg)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _add_pipeline_flags(p, weights=True):
    if weights:
        p.add_argument("--weights", help="DSTW weight bundle")
    p.add_argument("--config", help="key=value pipeline config; flags below override it")
    p.add_argument("--variant", choices=("wave", "mel"))
    p.add_argument("--cl", choices=("on", "off"), help="contextual attention layers")
    p.add_argument("--la-ms", dest="la_ms", type=int, choices=(0, 20, 60, 140, 280))
    p.add_argument("--chunk-ms", dest="chunk_ms", type=int)
    p.add_argument("--kmeans", help="codebook bundle for the k-means bottleneck")
    p.add_argument("--use-kmeans", dest="use_kmeans", action="store_true")


def _add_sampling_flags(p):
    p.add_argument("--gan-weights", dest="gan_weights")
    p.add_argument("--sources-dir", dest="sources_dir", help="directory of source .emb files")
    p.add_argument("--threshold", type=float, default=0.65)
    p.add_argument("--max-tries", dest="max_tries", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkstream", description="Streaming speaker anonymisation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anonymize", help="anonymise a WAV file chunk by chunk")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")
    _add_pipeline_flags(p)
    p.add_argument("--target-emb", dest="target_emb")
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", action="store_true", help="print a latency report")
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("bench", help="latency table over look-ahead 0/140/280 ms")
    p.add_argument("--in", dest="in_path")
    _add_pipeline_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", action="store_true", help="also print each report as JSON")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="offline vs streamed output difference")
    p.add_argument("--in", dest="in_path")
    _add_pipeline_flags(p)
    p.add_argument("--target-emb", dest="target_emb")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fit-kmeans", help="fit a k-means codebook on content frames")
    p.add_argument("--in", dest="in_path", help="WAV file, directory of WAVs, or .npy frame matrix")
    p.add_argument("--out")
    _add_pipeline_flags(p)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_kmeans)

    p = sub.add_parser("sample-speaker", help="draw a pseudo-speaker embedding")
    p.add_argument("--out")
    _add_sampling_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_speaker)

    p = sub.add_parser("eer", help="equal error rate of a score file")
    p.add_argument("--scores")
    p.add_argument("--report", action="store_true")
    p.set_defaults(func=cmd_eer)

    p = sub.add_parser("init-weights", help="write seeded random weights")
    p.add_argument("--out")
    p.add_argument("--kind", choices=("pipeline", "gan"), default="pipeline")
    p.add_argument("--gan-size", dest="gan_size", choices=("full", "toy"), default="full")
    p.add_argument("--config-out", dest="config_out", help="also write the matching config file")
    _add_pipeline_flags(p, weights=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DARKSTREAM_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"darkstream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExhaustedTries as exc:
        print(f"darkstream: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except FormatError as exc:
        print(f"darkstream: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DarkStreamError as exc:
        print(f"darkstream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
