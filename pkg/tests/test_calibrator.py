import numpy as np
import pytest

from calibkit.calibrator import (
    BenchmarkConfig,
    CalibrationConfig,
    CalibrationRunError,
    LossEvaluator,
    Strategy,
    run_benchmark,
    run_calibration,
)
from calibkit.losses import SeriesPanel
from calibkit.models import (
    BrockHommesConfig,
    BrockHommesModel,
    Model,
    SyntheticLandscapeModel,
)

RF_FAST = {"RF": {"n_trees": 15, "max_depth": 8}}
XB_FAST = {"XB": {"n_rounds": 30}}


def sphere_config(**overrides):
    model = SyntheticLandscapeModel("sphere", 2)
    defaults = dict(
        model=model,
        space=model.default_space(),
        target=SeriesPanel(np.zeros((1, 10))),
        strategy=Strategy("single", ("RF",), sampler_options=RF_FAST),
        loss_kind="euclidean",
        batch_size=4,
        ensemble_size=2,
        n_batches=20,
        n_steps=10,
        burn_in=0,
        master_seed=11,
    )
    defaults.update(overrides)
    return CalibrationConfig(**defaults)


class TestStrategy:
    def test_labels(self):
        assert Strategy("single", ("RF",)).label == "RF"
        assert Strategy("round_robin", ("RF", "BB")).label == "RR-RF+BB"
        assert Strategy("bandit", ("RF", "XB", "BB")).label == "RL-RF+XB+BB"

    def test_single_needs_one_arm(self):
        with pytest.raises(ValueError):
            Strategy("single", ("RF", "BB"))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Strategy("magic", ("RF",))


class TestRunCalibration:
    def test_bootstrap_only_run(self):
        config = sphere_config(n_batches=1)
        result = run_calibration(config)
        assert len(result.state.records) == config.batch_size
        assert all(r.sampler_id == "H" for r in result.state.records)
        assert result.trace == []

    def test_budget_accounting(self):
        config = sphere_config(n_batches=12)
        result = run_calibration(config)
        assert len(result.state.records) == 12 * 4
        for b in range(12):
            assert sum(r.batch_index == b for r in result.state.records) == 4

    def test_improvement_on_smooth_landscape(self):
        improved = 0
        for seed in range(5):
            config = sphere_config(n_batches=50, master_seed=seed)
            result = run_calibration(config)
            first = min(r.loss for r in result.state.records[:4])
            improved += result.best[0] < first
        assert improved == 5

    def test_deterministic_rerun(self):
        config = sphere_config(n_batches=10)
        a = run_calibration(config)
        b = run_calibration(config)
        assert a.state.records == b.state.records
        assert a.trace == b.trace

    def test_round_robin_alternates(self):
        config = sphere_config(
            strategy=Strategy("round_robin", ("RND", "BB")),
            n_batches=7,
        )
        result = run_calibration(config)
        arms = [s.arm for s in result.trace]
        assert arms == ["RND", "BB", "RND", "BB", "RND", "BB"]

    def test_rewards_match_convergence(self):
        config = sphere_config(n_batches=15)
        result = run_calibration(config)
        best = [c[2] for c in result.convergence]
        for step in result.trace:
            assert 0.0 <= step.reward <= 1.0
            # reward is positive exactly when the batch improved the best
            improved = best[step.step] < best[step.step - 1]
            assert (step.reward > 0) == improved

    def test_outputs_written_and_resume_identical(self, tmp_path):
        out_full = tmp_path / "full"
        out_part = tmp_path / "part"
        run_calibration(sphere_config(n_batches=10, output_dir=out_full))
        run_calibration(sphere_config(n_batches=5, output_dir=out_part))
        resumed = run_calibration(
            sphere_config(n_batches=10, output_dir=out_part), resume_from=out_part / "checkpoint.txt"
        )
        assert resumed.state.batch_count == 10
        for name in ("checkpoint.txt", "trace.csv", "convergence.csv"):
            assert (out_full / name).read_bytes() == (out_part / name).read_bytes()

    def test_resume_rejects_wrong_seed(self, tmp_path):
        out = tmp_path / "run"
        run_calibration(sphere_config(n_batches=3, output_dir=out))
        with pytest.raises(CalibrationRunError, match="master seed"):
            run_calibration(
                sphere_config(n_batches=6, master_seed=999, output_dir=out),
                resume_from=out / "checkpoint.txt",
            )

    def test_parallel_invariance(self, tmp_path):
        outs = {}
        for workers in (1, 4):
            out = tmp_path / f"w{workers}"
            run_calibration(sphere_config(n_batches=6, workers=workers, output_dir=out))
            outs[workers] = out
        for name in ("checkpoint.txt", "trace.csv", "convergence.csv"):
            assert (outs[1] / name).read_bytes() == (outs[4] / name).read_bytes()

    def test_exploding_model_records_sentinel(self):
        cfg = BrockHommesConfig(
            belief_types=((0.0, 0.0), (0.9, 0.2), (0.9, -0.2), (1.01, 0.0)),
            noise_std=0.0,
            initial_deviation=1.0,
        )
        model = BrockHommesModel(cfg)
        space = model.default_space()
        target = model.simulate(np.array([0.5, 0.1, 0.5, -0.1, 1.0]), 60, 20, 5)
        config = CalibrationConfig(
            model=model,
            space=space,
            target=target,
            strategy=Strategy("single", ("RND",)),
            loss_kind="moments",
            batch_size=6,
            ensemble_size=1,
            n_batches=8,
            n_steps=60,
            burn_in=20,
            master_seed=1,
        )
        result = run_calibration(config)
        losses = result.state.losses_array()
        assert np.any(~np.isfinite(losses))  # explosive corners hit the guard
        assert np.any(np.isfinite(losses))
        assert np.isfinite(result.best[0])

    def test_all_points_failing_aborts(self):
        class DoomedModel(Model):
            name = "doomed"
            param_names = ("x1", "x2")
            dim_names = ("v",)

            def default_space(self):
                return SyntheticLandscapeModel("sphere", 2).default_space()

            def simulate_ensemble(self, params, n_steps, burn_in, seeds):
                from calibkit.models import ModelExplosionError

                raise ModelExplosionError(0, "always fails")

        model = DoomedModel()
        config = CalibrationConfig(
            model=model,
            space=model.default_space(),
            target=SeriesPanel(np.zeros((1, 10))),
            strategy=Strategy("single", ("RND",)),
            loss_kind="euclidean",
            n_batches=2,
            n_steps=10,
            master_seed=0,
        )
        with pytest.raises(CalibrationRunError, match="batch 0"):
            run_calibration(config)


class TestLossEvaluator:
    def test_moments_weights_cached(self):
        rng = np.random.default_rng(0)
        target = SeriesPanel(rng.standard_normal((2, 60)))
        evaluator = LossEvaluator(target, "moments")
        sim = SeriesPanel(rng.standard_normal((2, 60)))
        from calibkit.losses import moments_loss

        assert evaluator(sim) == pytest.approx(moments_loss(target, [sim]), rel=1e-12)
        assert evaluator(target) == 0.0

    def test_preprocess_applied_to_sim(self):
        t = np.arange(40, dtype=float)
        target_raw = SeriesPanel(np.exp(0.02 * t)[None, :], ("deflator",))
        from calibkit.losses import preprocess_panel

        transforms = {"deflator": ["log_difference", "de_mean"]}
        target = preprocess_panel(target_raw, transforms)
        evaluator = LossEvaluator(target, "euclidean", preprocess=transforms)
        # a rescaled deflator has identical log-difference-demeaned form
        sim = SeriesPanel(5.0 * np.exp(0.02 * t)[None, :], ("deflator",))
        assert evaluator(sim) == pytest.approx(0.0, abs=1e-12)


class TestBenchmark:
    def test_single_strategy_single_rep(self):
        base = sphere_config(n_batches=5)
        bench = BenchmarkConfig(base=base, strategies=[base.strategy], repetitions=1)
        result = run_benchmark(bench)
        stat = result.stats["RF"]
        run = result.results[("RF", 0)]
        assert np.array_equal(stat.mean_curve, [c[2] for c in run.convergence])
        assert stat.se_final == 0.0

    def test_summary_statistics_hand_computed(self):
        from calibkit.calibrator import StrategyStats

        stat = StrategyStats("X", np.array([[9.0], [10.0], [11.0]]), np.array([4]))
        assert stat.mean_final == 10.0
        assert stat.se_final == pytest.approx(1.0 / np.sqrt(3.0), rel=1e-12)

    def test_paired_bootstrap_batches(self, tmp_path):
        base = sphere_config(n_batches=3)
        strategies = [
            Strategy("single", ("RND",)),
            Strategy("single", ("BB",)),
        ]
        bench = BenchmarkConfig(base=base, strategies=strategies, repetitions=2, output_dir=tmp_path / "b")
        result = run_benchmark(bench)
        for rep in (0, 1):
            a = result.results[("RND", rep)].state.records[:4]
            b = result.results[("BB", rep)].state.records[:4]
            assert [r.params for r in a] == [r.params for r in b]

    def test_output_accounting(self, tmp_path):
        base = sphere_config(n_batches=3)
        strategies = [Strategy("single", ("RND",)), Strategy("single", ("H",))]
        out = tmp_path / "bench"
        bench = BenchmarkConfig(base=base, strategies=strategies, repetitions=2, output_dir=out)
        run_benchmark(bench)
        run_dirs = sorted(p for p in (out / "runs").rglob("checkpoint.txt"))
        assert len(run_dirs) == 4
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 1 + 4
        assert (out / "curve_RND.csv").exists()
        assert (out / "curve_H.csv").exists()

    def test_seed_schedule_validation(self):
        base = sphere_config()
        with pytest.raises(ValueError, match="seed_schedule"):
            BenchmarkConfig(base=base, strategies=[base.strategy], repetitions=2, seed_schedule=[1])
