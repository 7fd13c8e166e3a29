import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from calibkit.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run_cli(*argv):
    return main([str(a) for a in argv])


def tiny_sphere_config(tmp_path, **overrides):
    cfg = {
        "model": {"name": "sphere", "settings": {"dimension": 2}},
        "loss": {"kind": "euclidean", "target": {"kind": "zeros"}},
        "strategy": {
            "kind": "single",
            "sampler": "RF",
            "options": {"RF": {"n_trees": 10, "max_depth": 6, "pool_size": 256}},
        },
        "budget": {"batch_size": 4, "ensemble_size": 1, "n_batches": 6, "n_steps": 10},
        "seeds": {"master_seed": 3},
        "output": {"workers": 1, "plots": False},
    }
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestCalibrateCommand:
    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = run_cli("calibrate", tmp_path / "nope.yaml", "--output", tmp_path / "out")
        assert code == 2
        assert "nope.yaml" in capsys.readouterr().err

    def test_unknown_key_names_path(self, tmp_path, capsys):
        path = tiny_sphere_config(tmp_path)
        cfg = yaml.safe_load(path.read_text())
        cfg["strategy"]["epsilonn"] = 0.3
        path.write_text(yaml.safe_dump(cfg))
        code = run_cli("calibrate", path, "--output", tmp_path / "out")
        assert code == 2
        assert "strategy.epsilonn" in capsys.readouterr().err

    def test_quickstart_writes_outputs(self, tmp_path):
        out = tmp_path / "quick"
        code = run_cli("calibrate", CONFIGS / "quickstart_sphere.yaml", "--output", out)
        assert code == 0
        for name in ("checkpoint.txt", "trace.csv", "convergence.csv"):
            assert (out / name).exists(), name
        assert (out / "resolved_config.yaml").exists()
        assert (out / "convergence.png").exists()

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        path = tiny_sphere_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("calibrate", path, "--output", out) == 0
        assert run_cli("calibrate", path, "--output", out) == 2
        assert "--force" in capsys.readouterr().err
        assert run_cli("calibrate", path, "--output", out, "--force") == 0

    def test_master_seed_override_changes_outputs(self, tmp_path):
        path = tiny_sphere_config(tmp_path)
        out_a, out_b, out_c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert run_cli("calibrate", path, "--output", out_a) == 0
        assert run_cli("calibrate", path, "--output", out_b, "--master-seed", 99) == 0
        assert run_cli("calibrate", path, "--output", out_c, "--master-seed", 99) == 0
        conv = lambda p: (p / "convergence.csv").read_bytes()
        assert conv(out_a) != conv(out_b)
        assert conv(out_b) == conv(out_c)

    def test_rerun_with_echoed_config_reproduces(self, tmp_path):
        path = tiny_sphere_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run_cli("calibrate", path, "--output", out_a) == 0
        echoed = out_a / "resolved_config.yaml"
        assert run_cli("calibrate", echoed, "--output", out_b) == 0
        assert (out_a / "convergence.csv").read_bytes() == (out_b / "convergence.csv").read_bytes()
        assert (out_a / "checkpoint.txt").read_bytes() == (out_b / "checkpoint.txt").read_bytes()


class TestBenchmarkCommand:
    def benchmark_config(self, tmp_path):
        cfg = yaml.safe_load(tiny_sphere_config(tmp_path).read_text())
        del cfg["strategy"]
        cfg["benchmark"] = {
            "repetitions": 2,
            "strategies": [
                {"kind": "single", "sampler": "RND"},
                {"kind": "single", "sampler": "BB"},
            ],
        }
        path = tmp_path / "bench.yaml"
        path.write_text(yaml.safe_dump(cfg))
        return path

    def test_accounting(self, tmp_path):
        path = self.benchmark_config(tmp_path)
        out = tmp_path / "bench_out"
        assert run_cli("benchmark", path, "--output", out) == 0
        checkpoints = list((out / "runs").rglob("checkpoint.txt"))
        assert len(checkpoints) == 4
        rows = (out / "summary.csv").read_text().splitlines()
        assert len(rows) == 5  # header + 2 strategies x 2 reps
        assert (out / "curve_RND.csv").exists()
        assert (out / "curve_BB.csv").exists()

    def test_benchmark_requires_benchmark_section(self, tmp_path, capsys):
        path = tiny_sphere_config(tmp_path)
        assert run_cli("benchmark", path, "--output", tmp_path / "o") == 2
        assert "benchmark" in capsys.readouterr().err


class TestAnalyzeCommand:
    def make_trace(self, tmp_path):
        from calibkit.scheduler import TraceStep, write_trace_csv

        steps = [
            TraceStep(1, "RF", 3.0, 3.0, 0.1),
            TraceStep(2, "RF", 2.5, 2.5, 0.3),
            TraceStep(3, "BB", 2.5, 2.5, 0.0),
        ]
        path = tmp_path / "trace.csv"
        write_trace_csv(steps, (), [np.empty(0)] * 3, path)
        return path

    def test_single_arm_average(self, tmp_path, capsys):
        path = self.make_trace(tmp_path)
        assert run_cli("analyze", path) == 0
        out = capsys.readouterr().out
        assert "RF" in out and "0.2" in out

    def test_contextual_table(self, tmp_path, capsys):
        path = self.make_trace(tmp_path)
        out_dir = tmp_path / "analysis"
        assert run_cli("analyze", path, "--contextual", "--output", out_dir) == 0
        table = (out_dir / "q_table.csv").read_text().splitlines()
        assert table[0] == "arm,single,global,high,low"

    def test_empty_trace_list_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("analyze")
        assert exc.value.code == 2

    def test_malformed_trace_exits_3(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("step,arm,batch_min_loss,best_loss,reward\nx,RF,1,1,0.1\n")
        assert run_cli("analyze", path) == 3
        assert ":2:" in capsys.readouterr().err


class TestExportCommand:
    def test_export_round_trip(self, tmp_path, capsys):
        cfg = {
            "model": {"name": "bh4", "settings": {"noise_std": 0.02}},
            "loss": {
                "kind": "moments",
                "weight_floor": 0.05,
                "target": {"kind": "pseudo_true", "params": [0.9, 0.2, 0.8, -0.2, 4.0], "seed": 7},
            },
            "strategy": {"kind": "single", "sampler": "H"},
            "budget": {"batch_size": 4, "ensemble_size": 2, "n_batches": 3, "n_steps": 60, "burn_in": 20},
            "seeds": {"master_seed": 5},
            "output": {"workers": 1, "plots": False},
        }
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(cfg))
        out = tmp_path / "run_out"
        assert run_cli("calibrate", path, "--output", out) == 0
        assert run_cli("export-moments", out) == 0
        printed = capsys.readouterr().out
        assert "recomputed loss" in printed
        table = (out / "export" / "moments_real_vs_sim.csv").read_text().splitlines()
        assert len(table) == 1 + 18  # header + 18 rows for the single dimension
        assert (out / "export" / "real_series.csv").exists()
        assert (out / "export" / "sim_series_member0.csv").exists()
        assert (out / "export" / "moments_comparison.png").exists()
        # recomputed loss must match the checkpoint value
        recorded = float(next(l for l in printed.splitlines() if l.startswith("checkpoint best loss")).split(":")[1])
        recomputed = float(next(l for l in printed.splitlines() if l.startswith("recomputed loss")).split(":")[1])
        assert abs(recorded - recomputed) <= 1e-9 * max(1.0, abs(recorded))

    def test_missing_checkpoint_exits_2(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert run_cli("export-moments", tmp_path / "empty") == 2
        assert "checkpoint" in capsys.readouterr().err


class TestDeterminismAcrossWorkers:
    def test_quickstart_byte_identical_for_worker_counts(self, tmp_path):
        outs = {}
        for workers in (1, 8):
            for attempt in ("x", "y"):
                out = tmp_path / f"w{workers}{attempt}"
                code = run_cli(
                    "calibrate",
                    CONFIGS / "quickstart_sphere.yaml",
                    "--output",
                    out,
                    "--workers",
                    workers,
                )
                assert code == 0
                outs[(workers, attempt)] = out
        reference = (outs[(1, "x")] / "convergence.csv").read_bytes()
        for key, out in outs.items():
            assert (out / "convergence.csv").read_bytes() == reference, key
            assert (out / "trace.csv").read_bytes() == (outs[(1, "x")] / "trace.csv").read_bytes(), key
