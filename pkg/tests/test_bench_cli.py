import csv

import numpy as np
import pytest

from mergesim import weights_io
from mergesim.bench import (
    BenchSpec,
    RunRecord,
    fit_scaling,
    run_bench,
    summarize_markdown,
)
from mergesim.cli import main
from mergesim.container import read_container
from mergesim.errors import DataFormatError, ProtocolError
from mergesim.merge import calibrate_constant_attention
from mergesim.model import generate_vanilla
from mergesim.private import EncryptedSession, Variant
from mergesim.er import generate_er


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-fixture + calibrate + merge output tree, built once via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-fixture", "--out", str(root), "--seed", "5",
                 "--max-len", "32"]) == 0
    assert main(["calibrate", "--model", str(root / "toy.mrgw"),
                 "--out", str(root / "calib.mrgw"), "--seed", "2",
                 "--corpus-size", "3"]) == 0
    assert main(["merge", "--model", str(root / "toy.mrgw"),
                 "--calib", str(root / "calib.mrgw"),
                 "--out", str(root / "merged.mrgw")]) == 0
    return root


class TestContainers:
    def test_model_round_trip(self, toy_weights, tmp_path):
        path = tmp_path / "m.mrgw"
        weights_io.save_model(path, toy_weights)
        loaded = weights_io.load_model(path)
        assert loaded.config == toy_weights.config
        assert np.array_equal(loaded.embedding, toy_weights.embedding)
        assert np.array_equal(loaded.layers[1].w_o, toy_weights.layers[1].w_o)

    def test_merged_round_trip(self, toy_merged, tmp_path):
        path = tmp_path / "mm.mrgw"
        weights_io.save_merged(path, toy_merged)
        loaded = weights_io.load_merged(path)
        assert np.array_equal(loaded.layers[0].m_u, toy_merged.layers[0].m_u)
        assert np.array_equal(loaded.layers[1].c, toy_merged.layers[1].c)
        assert loaded.ffn_residual == toy_merged.ffn_residual

    def test_calibration_round_trip(self, toy_weights, toy_calibration, tmp_path):
        path = tmp_path / "c.mrgw"
        weights_io.save_calibration(path, toy_calibration, toy_weights.config)
        loaded, config = weights_io.load_calibration(path)
        assert config == toy_weights.config
        assert np.array_equal(loaded.per_layer[0], toy_calibration.per_layer[0])

    def test_kind_checks(self, toy_weights, toy_merged, tmp_path):
        mpath, mmpath = tmp_path / "m.mrgw", tmp_path / "mm.mrgw"
        weights_io.save_model(mpath, toy_weights)
        weights_io.save_merged(mmpath, toy_merged)
        with pytest.raises(DataFormatError):
            weights_io.load_model(mmpath)
        with pytest.raises(DataFormatError):
            weights_io.load_merged(mpath)
        assert weights_io.load_any(mpath)[0] == "model"
        assert weights_io.load_any(mmpath)[0] == "merged"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.mrgw"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(DataFormatError):
            read_container(path)

    def test_deterministic_bytes(self, toy_weights, tmp_path):
        p1, p2 = tmp_path / "a.mrgw", tmp_path / "b.mrgw"
        weights_io.save_model(p1, toy_weights)
        weights_io.save_model(p2, toy_weights)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_fields(self, toy_weights, tmp_path):
        path = tmp_path / "m.mrgw"
        weights_io.save_model(path, toy_weights)
        config, _, flags = read_container(path)
        assert flags == 0
        assert config == toy_weights.config


class TestGenFixture:
    def test_same_seed_identical_files(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            assert main(["gen-fixture", "--out", str(d), "--seed", "9",
                         "--max-len", "32"]) == 0
        assert (d1 / "toy.mrgw").read_bytes() == (d2 / "toy.mrgw").read_bytes()
        assert (d1 / "echo.mrgw").read_bytes() == (d2 / "echo.mrgw").read_bytes()

    def test_echo_fixture_passes_er_equivalence(self, workspace):
        echo = weights_io.load_model(workspace / "echo.mrgw")
        vanilla = generate_vanilla([3, 1], 12, echo)
        er = generate_er([3, 1], 12, echo).sample()
        assert np.array_equal(vanilla, er)

    def test_header_round_trips(self, workspace):
        toy = weights_io.load_model(workspace / "toy.mrgw")
        assert toy.config.max_len == 32
        assert toy.config.vocab_size == 256


class TestCalibrateMergeCli:
    def test_calibration_rows_stochastic(self, workspace):
        calib, _ = weights_io.load_calibration(workspace / "calib.mrgw")
        for c in calib.per_layer:
            assert np.allclose(c.sum(-1), 1.0, atol=1e-9)

    def test_calibrate_deterministic(self, workspace, tmp_path):
        out = tmp_path / "calib2.mrgw"
        assert main(["calibrate", "--model", str(workspace / "toy.mrgw"),
                     "--out", str(out), "--seed", "2", "--corpus-size", "3"]) == 0
        assert out.read_bytes() == (workspace / "calib.mrgw").read_bytes()

    def test_single_sequence_corpus_reproduces_attention(self, workspace):
        toy = weights_io.load_model(workspace / "toy.mrgw")
        seq = np.arange(32) % 17
        calib = calibrate_constant_attention(toy, [seq])
        from mergesim.model import add_positional, embed_lookup, transformer_forward
        e = add_positional(embed_lookup(seq, toy.embedding), toy.positional)
        _, attns = transformer_forward(e, toy, collect_attention=True)
        assert np.allclose(calib.per_layer[0], attns[0], atol=1e-12)

    def test_merge_rejects_already_merged(self, workspace, tmp_path):
        code = main(["merge", "--model", str(workspace / "merged.mrgw"),
                     "--calib", str(workspace / "calib.mrgw"),
                     "--out", str(tmp_path / "x.mrgw")])
        assert code == 3

    def test_ffn_residual_ablation_flag(self, workspace, tmp_path):
        out = tmp_path / "ablation.mrgw"
        assert main(["merge", "--model", str(workspace / "toy.mrgw"),
                     "--calib", str(workspace / "calib.mrgw"),
                     "--out", str(out), "--ffn-residual"]) == 0
        merged = weights_io.load_merged(out)
        assert merged.ffn_residual
        assert merged.layers[0].res_p is not None
        # ablation models are plaintext-only: encrypted sessions refuse them
        with pytest.raises(ProtocolError):
            EncryptedSession(merged, Variant.ONLY_MM, seed=0)

    def test_merged_output_loadable_by_sessions(self, workspace):
        merged = weights_io.load_merged(workspace / "merged.mrgw")
        res = EncryptedSession(merged, Variant.ONLY_MM, seed=0).generate([1, 2], 2)
        assert res.tokens.size == 2
        assert res.ledger["Softmax"]["bytes"] == 0


class TestBench:
    def test_bench_outputs(self, workspace, tmp_path):
        out = tmp_path / "bench"
        assert main(["bench", "--model", str(workspace / "toy.mrgw"),
                     "--merged", str(workspace / "merged.mrgw"),
                     "--variant", "Vanilla", "--variant", "ER_MM",
                     "--lens", "2,4", "--prefix-len", "2", "--seed", "3",
                     "--out", str(out)]) == 0
        assert (out / "bench.csv").exists()
        assert (out / "bench.png").stat().st_size > 0
        md = (out / "bench.md").read_text()
        for n in (2, 4):
            assert f"## Sequence length {n}" in md
        for column in ("Embed", "Linear", "Softmax", "Sampling", "Total", "Fraction"):
            assert column in md
        assert md.count("| Vanilla |") == 2 and md.count("| ER_MM |") == 2
        assert "| Vanilla |" in md and "100.00%" in md

    def test_bench_csv_deterministic_modulo_wall(self, workspace, tmp_path):
        rows = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert main(["bench", "--model", str(workspace / "toy.mrgw"),
                         "--variant", "Vanilla", "--lens", "2", "--seed", "7",
                         "--out", str(out)]) == 0
            with open(out / "bench.csv", newline="") as fh:
                rows.append([
                    {k: v for k, v in row.items() if k != "wall_ns"}
                    for row in csv.DictReader(fh)
                ])
        assert rows[0] == rows[1]

    def test_fraction_of_vanilla_is_100(self, workspace, tmp_path):
        out = tmp_path / "bench"
        main(["bench", "--model", str(workspace / "toy.mrgw"),
              "--variant", "Vanilla", "--lens", "2", "--out", str(out)])
        assert "100.00%" in (out / "bench.md").read_text()

    def test_synthetic_clock_column(self, workspace, tmp_path):
        out = tmp_path / "bench"
        main(["bench", "--model", str(workspace / "toy.mrgw"),
              "--variant", "Vanilla", "--lens", "2", "--out", str(out),
              "--ns-per-byte", "0.8", "--ns-per-round", "1000"])
        assert "Synthetic time (s, modeled)" in (out / "bench.md").read_text()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BenchSpec(variants=["Vanilla"], lens=[2], reps=0)
        with pytest.raises(ValueError):
            BenchSpec(variants=["NoSuch"], lens=[2])


def synthetic_records(power):
    records = []
    for n in (4, 8, 16, 32):
        for category in ("Linear",):
            records.append(RunRecord(
                variant="Vanilla", seq_len=n, rep=0, category=category,
                bytes=int(1000 * n**power), rounds=1, op_count=1, wall_ns=0,
            ))
    return records


class TestScalingFit:
    def test_synthetic_quadratic(self):
        fits = fit_scaling(synthetic_records(2.0))
        fit = [f for f in fits if f.category == "Linear"][0]
        assert abs(fit.slope - 2.0) <= 0.01
        assert fit.r2 > 0.9999

    def test_synthetic_linear(self):
        fits = fit_scaling(synthetic_records(1.0))
        fit = [f for f in fits if f.category == "Linear"][0]
        assert abs(fit.slope - 1.0) <= 0.01

    def test_band_flags(self):
        fits = fit_scaling(synthetic_records(2.0))
        fit = [f for f in fits if f.category == "Linear"][0]
        assert fit.expected_lo == 1.7 and fit.expected_hi == 2.3
        assert fit.within_band is True

    def test_cli_round_trip(self, workspace, tmp_path):
        bench_dir = tmp_path / "bench"
        main(["bench", "--model", str(workspace / "toy.mrgw"),
              "--variant", "OnlyER", "--lens", "2,4,8", "--out", str(bench_dir)])
        fit_dir = tmp_path / "fit"
        code = main(["scaling-fit", "--bench", str(bench_dir / "bench.csv"),
                     "--out", str(fit_dir)])
        assert code == 0  # OnlyER has no expected band: nothing to violate
        assert (fit_dir / "scaling.csv").exists()
        assert (fit_dir / "scaling.png").stat().st_size > 0

    def test_insufficient_lengths(self, workspace, tmp_path):
        bench_dir = tmp_path / "bench"
        main(["bench", "--model", str(workspace / "toy.mrgw"),
              "--variant", "Vanilla", "--lens", "2,4", "--out", str(bench_dir)])
        code = main(["scaling-fit", "--bench", str(bench_dir / "bench.csv"),
                     "--out", str(tmp_path / "fit")])
        assert code == 3


class TestSweepNoise:
    def test_csv_deterministic(self, workspace, tmp_path):
        outs = []
        for name in ("n1", "n2"):
            out = tmp_path / name
            assert main(["sweep-noise", "--model", str(workspace / "toy.mrgw"),
                         "--mse", "0,0.01", "--steps", "4", "--seed", "6",
                         "--out", str(out)]) == 0
            outs.append((out / "noise.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_outputs(self, workspace, tmp_path):
        out = tmp_path / "noise"
        assert main(["sweep-noise", "--model", str(workspace / "toy.mrgw"),
                     "--mse", "0,0.02", "--steps", "4", "--seed", "2",
                     "--out", str(out)]) == 0
        with open(out / "noise.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert set(r["mode"] for r in rows) == {"vanilla", "er"}
        zero = [r for r in rows if float(r["target_mse"]) == 0.0]
        assert all(float(r["agreement_rate"]) == 1.0 for r in zero)
        nonzero = [r for r in rows if float(r["target_mse"]) > 0.0]
        for r in nonzero:
            assert abs(float(r["measured_mse"]) - 0.02) <= 0.001
        assert (out / "noise.png").stat().st_size > 0


class TestExitCodes:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["bench"])  # missing required arguments
        assert exc.value.code == 2

    def test_data_error(self, tmp_path):
        assert main(["calibrate", "--model", str(tmp_path / "missing.mrgw"),
                     "--out", str(tmp_path / "c.mrgw")]) == 3

    def test_protocol_error_mapped(self, monkeypatch):
        import mergesim.cli as cli_mod

        def boom(args):
            raise ProtocolError("triple reuse")

        monkeypatch.setitem(cli_mod.build_parser.__dict__, "x", None)
        parser = cli_mod.build_parser()
        args = parser.parse_args(["gen-fixture", "--out", "/tmp/x"])
        args.func = boom
        monkeypatch.setattr(cli_mod, "build_parser", lambda: parser)
        monkeypatch.setattr(parser, "parse_args", lambda argv=None: args)
        assert cli_mod.main(["gen-fixture", "--out", "/tmp/x"]) == 4

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MERGE_SEED", "9")
        d1 = tmp_path / "env"
        assert main(["gen-fixture", "--out", str(d1), "--max-len", "32"]) == 0
        monkeypatch.delenv("MERGE_SEED")
        d2 = tmp_path / "flag"
        assert main(["gen-fixture", "--out", str(d2), "--seed", "9",
                     "--max-len", "32"]) == 0
        assert (d1 / "toy.mrgw").read_bytes() == (d2 / "toy.mrgw").read_bytes()


class TestBenchRunner:
    def test_variant_model_requirements(self, toy_weights):
        spec = BenchSpec(variants=["ER_MM"], lens=[2])
        with pytest.raises(Exception):
            run_bench(spec, toy_weights, None)

    def test_markdown_one_row_per_variant(self, echo_weights, echo_merged):
        spec = BenchSpec(variants=["Vanilla", "OnlyMM"], lens=[2], prefix_len=2, seed=1)
        records = run_bench(spec, echo_weights, echo_merged)
        md = summarize_markdown(records, spec)
        assert md.count("| Vanilla |") == 1
        assert md.count("| OnlyMM |") == 1

    def test_fraction_dashes_without_baseline(self, echo_merged):
        spec = BenchSpec(variants=["OnlyMM"], lens=[2], prefix_len=2, seed=1)
        records = run_bench(spec, None, echo_merged)
        md = summarize_markdown(records, spec)
        row = next(line for line in md.splitlines() if line.startswith("| OnlyMM"))
        assert row.rstrip().endswith("| -- |")
