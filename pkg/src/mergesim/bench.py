"""Benchmark sweeps over (variant, sequence length) cells and scaling fits.

Byte and round counters are deterministic given seeds, so repetitions
exist only to smooth wall-clock noise; aggregation reports median bytes.
An optional synthetic clock (ns per byte + ns per round) turns counters
into clearly-labeled synthetic time columns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .merge import MergedModel
from .model import ModelWeights
from .private import EncryptedSession, MERGED_VARIANTS, Variant
from .sharing import CATEGORIES

EXPECTED_SLOPE_BANDS = {
    ("Vanilla", "Linear"): (1.7, 2.3),
    ("ER_MM", "Linear"): (0.7, 1.3),
}

BENCH_CSV_FIELDS = ("variant", "seq_len", "rep", "category", "bytes",
                    "rounds", "op_count", "wall_ns")


@dataclass
class BenchSpec:
    variants: list[str]
    lens: list[int]
    prefix_len: int = 1
    reps: int = 1
    seed: int = 0
    ns_per_byte: float = 0.0
    ns_per_round: float = 0.0

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("repetitions must be >= 1")
        if self.prefix_len < 1:
            raise ValueError("prefix length must be >= 1")
        self.variants = [Variant.from_label(v).value for v in self.variants]


@dataclass
class RunRecord:
    variant: str
    seq_len: int
    rep: int
    category: str
    bytes: int
    rounds: int
    op_count: int
    wall_ns: int


@dataclass
class ScalingFit:
    variant: str
    category: str
    slope: float
    intercept: float
    r2: float
    expected_lo: float | None = None
    expected_hi: float | None = None
    within_band: bool | None = None
    points: int = 0


def _model_for(variant: Variant, model: ModelWeights | None,
               merged: MergedModel | None):
    if variant in MERGED_VARIANTS:
        if merged is None:
            raise ShapeMismatchError(f"{variant.value} needs a merged model file")
        return merged
    if model is None:
        raise ShapeMismatchError(f"{variant.value} needs an unmerged model file")
    return model


def bench_prefix(spec: BenchSpec, vocab_size: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 99])
    return rng.integers(0, vocab_size, size=spec.prefix_len)


def run_bench(spec: BenchSpec, model: ModelWeights | None,
              merged: MergedModel | None) -> list[RunRecord]:
    some = model if model is not None else merged
    config = some.config
    if max(spec.lens) + spec.prefix_len > config.max_len:
        raise ShapeMismatchError("prefix length + sequence length exceeds max_len")
    prefix = bench_prefix(spec, config.vocab_size)
    records = []
    for label in spec.variants:
        variant = Variant.from_label(label)
        target = _model_for(variant, model, merged)
        for n in spec.lens:
            for rep in range(spec.reps):
                session = EncryptedSession(target, variant, seed=spec.seed)
                result = session.generate(prefix, n)
                for category in CATEGORIES:
                    vals = result.ledger[category]
                    records.append(RunRecord(
                        variant=label, seq_len=n, rep=rep, category=category,
                        bytes=vals["bytes"], rounds=vals["rounds"],
                        op_count=vals["op_count"], wall_ns=vals["wall_ns"],
                    ))
    return records


def write_bench_csv(path, records: list[RunRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_CSV_FIELDS)
        for r in records:
            writer.writerow([r.variant, r.seq_len, r.rep, r.category,
                             r.bytes, r.rounds, r.op_count, r.wall_ns])


def read_bench_csv(path) -> list[RunRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(RunRecord(
                variant=row["variant"], seq_len=int(row["seq_len"]),
                rep=int(row["rep"]), category=row["category"],
                bytes=int(row["bytes"]), rounds=int(row["rounds"]),
                op_count=int(row["op_count"]), wall_ns=int(row["wall_ns"]),
            ))
    return records


def median_bytes(records: list[RunRecord]) -> dict[tuple[str, int, str], int]:
    """(variant, seq_len, category) -> median bytes over reps."""
    buckets: dict[tuple[str, int, str], list[int]] = {}
    for r in records:
        buckets.setdefault((r.variant, r.seq_len, r.category), []).append(r.bytes)
    return {k: int(np.median(v)) for k, v in buckets.items()}


def summarize_markdown(records: list[RunRecord], spec: BenchSpec) -> str:
    """Tables mirroring the per-operation cost layout: one row per variant,
    byte columns per category plus Total and Fraction of the vanilla run."""
    med = median_bytes(records)
    lens = sorted({r.seq_len for r in records})
    variants = list(dict.fromkeys(r.variant for r in records))
    synthetic = spec.ns_per_byte > 0 or spec.ns_per_round > 0
    lines = []
    for n in lens:
        lines.append(f"## Sequence length {n}")
        lines.append("")
        header = ["Variant", *[f"{c} (B)" for c in CATEGORIES], "Total (B)", "Fraction"]
        if synthetic:
            header.append("Synthetic time (s, modeled)")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        vanilla_total = None
        totals = {}
        for v in variants:
            totals[v] = sum(med.get((v, n, c), 0) for c in CATEGORIES)
            if v == Variant.VANILLA.value:
                vanilla_total = totals[v]
        for v in variants:
            cells = [v] + [str(med.get((v, n, c), 0)) for c in CATEGORIES]
            cells.append(str(totals[v]))
            if vanilla_total:
                cells.append(f"{100.0 * totals[v] / vanilla_total:.2f}%")
            else:
                cells.append("--")
            if synthetic:
                rounds = sum(
                    r.rounds for r in records
                    if r.variant == v and r.seq_len == n and r.rep == 0
                )
                t = (totals[v] * spec.ns_per_byte + rounds * spec.ns_per_round) / 1e9
                cells.append(f"{t:.6f}")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def fit_scaling(records: list[RunRecord], min_points: int = 3) -> list[ScalingFit]:
    """Least-squares log-log fit of median bytes vs sequence length, per
    (variant, category); flags the variants with expected slope bands."""
    med = median_bytes(records)
    variants = list(dict.fromkeys(r.variant for r in records))
    lens = sorted({r.seq_len for r in records})
    fits = []
    for v in variants:
        for category in CATEGORIES:
            pts = [(n, med[(v, n, category)]) for n in lens
                   if med.get((v, n, category), 0) > 0]
            if len(pts) < min_points:
                continue
            x = np.log([p[0] for p in pts])
            y = np.log([p[1] for p in pts])
            slope, intercept = np.polyfit(x, y, 1)
            pred = slope * x + intercept
            ss_res = float(((y - pred) ** 2).sum())
            ss_tot = float(((y - y.mean()) ** 2).sum())
            r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
            band = EXPECTED_SLOPE_BANDS.get((v, category))
            fits.append(ScalingFit(
                variant=v, category=category, slope=float(slope),
                intercept=float(intercept), r2=r2,
                expected_lo=band[0] if band else None,
                expected_hi=band[1] if band else None,
                within_band=bool(band[0] <= slope <= band[1]) if band else None,
                points=len(pts),
            ))
    return fits


def write_scaling_csv(path, fits: list[ScalingFit]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "category", "slope", "intercept", "r2",
                         "points", "expected_lo", "expected_hi", "within_band"])
        for f in fits:
            writer.writerow([
                f.variant, f.category, f"{f.slope:.6f}", f"{f.intercept:.6f}",
                f"{f.r2:.6f}", f.points,
                "" if f.expected_lo is None else f.expected_lo,
                "" if f.expected_hi is None else f.expected_hi,
                "" if f.within_band is None else str(f.within_band).lower(),
            ])


def write_noise_csv(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "target_mse", "measured_mse",
                         "agreement_rate", "seq_len", "seed"])
        for r in rows:
            writer.writerow([r["mode"], f"{r['target_mse']:.8f}",
                             f"{r['measured_mse']:.8f}",
                             f"{r['agreement_rate']:.6f}",
                             r["seq_len"], r["seed"]])
