"""Command-line front end.

Subcommands: gen-fixture, calibrate, merge, bench, scaling-fit,
sweep-noise.  Every command is deterministic given its seed and inputs
(wall-clock columns excepted).  The seed resolution order is
--seed flag, then the MERGE_SEED environment variable, then 0.

Exit codes: 0 success, 2 usage error, 3 data/shape error, 4 protocol
error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import report, weights_io
from .er import noise_robustness_sweep
from .errors import (
    DataFormatError,
    DegenerateInputError,
    EncodingRangeError,
    ProtocolError,
    ShapeMismatchError,
)
from .fixtures import echo_fixture_consistent, make_echo_fixture
from .merge import calibrate_constant_attention, markov_corpus, merge_equivalence_check, merge_model
from .model import ModelConfig, init_model_weights

_DATA_ERRORS = (DataFormatError, ShapeMismatchError, EncodingRangeError,
                DegenerateInputError, ValueError, OSError)


def _resolve_seed(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("MERGE_SEED")
    return int(env) if env else 0


def _parse_lens(text: str) -> list[int]:
    lens = [int(part) for part in text.split(",") if part.strip()]
    if not lens:
        raise ValueError("at least one sequence length is required")
    return lens


def _parse_mses(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def cmd_gen_fixture(args) -> int:
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = ModelConfig(
        vocab_size=args.vocab_size, model_dim=args.model_dim,
        intermediate_dim=args.intermediate_dim, n_layers=args.n_layers,
        n_heads=args.n_heads, max_len=args.max_len, activation=args.activation,
    )
    toy = init_model_weights(config, seed)
    toy_path = out / "toy.mrgw"
    weights_io.save_model(toy_path, toy)

    echo = make_echo_fixture(seed=seed)
    if not echo_fixture_consistent(echo, [3, 1], 16):
        raise ProtocolError("generated echo fixture failed its equivalence check")
    echo_path = out / "echo.mrgw"
    weights_io.save_model(echo_path, echo)
    print(f"wrote {toy_path}")
    print(f"wrote {echo_path} (echo fixture, vocab {echo.config.vocab_size})")
    return 0


def cmd_calibrate(args) -> int:
    seed = _resolve_seed(args.seed)
    model = weights_io.load_model(args.model)
    corpus = markov_corpus(model.config.vocab_size, args.corpus_size,
                           model.config.max_len, seed)
    calib = calibrate_constant_attention(model, corpus)
    weights_io.save_calibration(args.out, calib, model.config)
    print(f"wrote {args.out} ({len(calib.per_layer)} layers, "
          f"max_len {calib.max_len}, corpus {args.corpus_size} seqs, seed {seed})")
    return 0


def cmd_merge(args) -> int:
    model = weights_io.load_model(args.model)
    calib, calib_config = weights_io.load_calibration(args.calib)
    if calib_config.max_len != model.config.max_len:
        raise DataFormatError("calibration max_len does not match the model")
    merged = merge_model(model, calib, ffn_residual=args.ffn_residual)
    deviation = merge_equivalence_check(model, merged, n_probe=8, seed=0)
    weights_io.save_merged(args.out, merged)
    print(f"wrote {args.out}")
    print(f"self-check: merged vs composed reference max deviation {deviation:.3e}")
    if deviation > 1e-5:
        print("self-check FAILED (deviation above 1e-5)", file=sys.stderr)
        return 3
    return 0


def cmd_bench(args) -> int:
    seed = _resolve_seed(args.seed)
    spec = bench_mod.BenchSpec(
        variants=args.variant, lens=_parse_lens(args.lens),
        prefix_len=args.prefix_len, reps=args.reps, seed=seed,
        ns_per_byte=args.ns_per_byte, ns_per_round=args.ns_per_round,
    )
    model = weights_io.load_model(args.model) if args.model else None
    merged = weights_io.load_merged(args.merged) if args.merged else None
    if model is None and merged is None:
        raise ShapeMismatchError("bench needs --model and/or --merged")
    records = bench_mod.run_bench(spec, model, merged)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bench.csv"
    bench_mod.write_bench_csv(csv_path, records)
    md_path = out / "bench.md"
    md_path.write_text(summary := bench_mod.summarize_markdown(records, spec))
    fig_path = out / "bench.png"
    report.bench_figure(records, fig_path)
    print(summary)
    print(f"wrote {csv_path}, {md_path}, {fig_path}")
    return 0


def cmd_scaling_fit(args) -> int:
    records = bench_mod.read_bench_csv(args.bench)
    lens_per_variant: dict[str, set] = {}
    for r in records:
        lens_per_variant.setdefault(r.variant, set()).add(r.seq_len)
    if any(len(v) < 3 for v in lens_per_variant.values()):
        raise ShapeMismatchError("scaling fits need at least 3 sequence lengths")
    fits = bench_mod.fit_scaling(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "scaling.csv"
    bench_mod.write_scaling_csv(csv_path, fits)
    fig_path = out / "scaling.png"
    report.scaling_figure(records, fits, fig_path)
    violations = 0
    for f in fits:
        if f.within_band is None:
            continue
        status = "ok" if f.within_band else "OUT OF BAND"
        if not f.within_band:
            violations += 1
        print(f"{f.variant}/{f.category}: slope {f.slope:.3f} "
              f"(expected [{f.expected_lo}, {f.expected_hi}]) {status}")
    print(f"wrote {csv_path}, {fig_path}")
    return 0 if violations == 0 else 3


def cmd_sweep_noise(args) -> int:
    seed = _resolve_seed(args.seed)
    model = weights_io.load_model(args.model)
    rng = np.random.default_rng([seed, 7])
    prefixes = [rng.integers(0, model.config.vocab_size, size=args.prefix_len)
                for _ in range(args.n_prefixes)]
    rows = noise_robustness_sweep(model, _parse_mses(args.mse), prefixes,
                                  args.steps, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "noise.csv"
    bench_mod.write_noise_csv(csv_path, rows)
    fig_path = out / "noise.png"
    report.noise_figure(rows, fig_path)
    for r in rows:
        print(f"{r['mode']:8s} mse={r['target_mse']:<10.4f} "
              f"agreement={r['agreement_rate']:.3f}")
    print(f"wrote {csv_path}, {fig_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergesim",
        description="Two-party secure-inference simulator and merge compiler",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixture", help="write a seeded toy model and the echo fixture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--intermediate-dim", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--activation", choices=["relu", "quad"], default="relu")
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("calibrate", help="average attention over a synthetic corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="corpus seed")
    p.add_argument("--corpus-size", type=int, default=8)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("merge", help="fold a model around its constant attention")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ffn-residual", action="store_true",
                   help="ablation: keep the MLP residual in the merged layer")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("bench", help="run encrypted generation benchmarks")
    p.add_argument("--model", default=None)
    p.add_argument("--merged", default=None)
    p.add_argument("--variant", action="append", required=True,
                   help="repeatable: Vanilla, OnlyER, OnlyMM, ER_MM")
    p.add_argument("--lens", required=True, help="comma-separated lengths")
    p.add_argument("--prefix-len", type=int, default=1)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ns-per-byte", type=float, default=0.0,
                   help="synthetic clock: nanoseconds per byte")
    p.add_argument("--ns-per-round", type=float, default=0.0,
                   help="synthetic clock: nanoseconds per round")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scaling-fit", help="log-log slope fits of a bench CSV")
    p.add_argument("--bench", required=True, help="bench.csv from the bench command")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_scaling_fit)

    p = sub.add_parser("sweep-noise", help="embedding-noise robustness sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--mse", required=True, help="comma-separated target MSE levels")
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--prefix-len", type=int, default=2)
    p.add_argument("--n-prefixes", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep_noise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 4
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
