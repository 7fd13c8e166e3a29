"""Acceptance criteria, one test per criterion, one PASS line each.

Criteria 4-6 share two session-scoped benchmark fixtures (the shipped
bh4_benchmark.yaml and sir_benchmark.yaml configs, 5 paired repetitions
each); the first test to request a fixture pays its multi-minute cost and
the criteria assert against the shared results.  Everything else is
seconds.
"""

import math
import re
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ttest_rel

from calibkit.calibrator import run_benchmark
from calibkit.cli import main as cli_main
from calibkit.config import build_benchmark, load_config_file, resolve_config
from calibkit.losses import compute_moments, hp_filter, moments_loss, panel_moments
from calibkit.samplers import halton_block, radical_inverse
from calibkit.scheduler import (
    BanditState,
    TraceStep,
    compute_reward,
    offline_q,
    offline_q_contextual,
    round_robin_select,
    summarize_traces,
    update_q,
)
from calibkit.surrogates import BoostConfig, fit_boosted

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"


def ok(criterion, message):
    print(f"\nACCEPTANCE {criterion}: PASS - {message}")


@pytest.fixture(scope="session")
def bh4_benchmark(tmp_path_factory):
    resolved = resolve_config(load_config_file(CONFIGS / "bh4_benchmark.yaml"), benchmark=True)
    out = tmp_path_factory.mktemp("bh4_bench")
    config = build_benchmark(resolved, output_dir=out, workers=1)
    return run_benchmark(config), out


@pytest.fixture(scope="session")
def sir_benchmark(tmp_path_factory):
    resolved = resolve_config(load_config_file(CONFIGS / "sir_benchmark.yaml"), benchmark=True)
    out = tmp_path_factory.mktemp("sir_bench")
    config = build_benchmark(resolved, output_dir=out, workers=1)
    return run_benchmark(config), out


class TestCriterion1ExactFormulas:
    def test_exact_formula_suite(self):
        # reward (fractional improvement, floored)
        assert compute_reward(10.0, 9.0) == pytest.approx(0.1, abs=1e-12)
        assert compute_reward(10.0, 12.0) == 0.0
        assert compute_reward(10.0, 0.0) == 1.0
        # value update: single step, fixed point, geometric series
        state = BanditState(("A",), epsilon=0.0, alpha=0.1)
        update_q(state, 0, 1.0)
        assert state.q[0] == pytest.approx(0.1, abs=1e-12)
        state = BanditState(("A",), epsilon=0.0, alpha=0.3, q=[0.5])
        update_q(state, 0, 0.5)
        assert state.q[0] == pytest.approx(0.5, abs=1e-12)
        state = BanditState(("A",), epsilon=0.0, alpha=0.1)
        for _ in range(10):
            update_q(state, 0, 0.7)
        assert state.q[0] == pytest.approx(0.7 * (1 - 0.9**10), rel=1e-12)
        # round robin
        assert [round_robin_select(s, ("a", "b")) for s in range(4)] == [0, 1, 0, 1]
        assert round_robin_select(7, ("a", "b", "c")) == 1
        assert round_robin_select(5, ("a",)) == 0
        # offline sample averages
        assert offline_q([(0, 1.0), (0, 0.0)]) == {0: 0.5}
        assert offline_q([]) == {}
        # Halton radical inverse
        assert list(radical_inverse([1, 2, 3, 4], 2)) == [0.5, 0.25, 0.75, 0.125]
        block = halton_block(1, 2, [2, 3])
        assert block[0, 0] == 0.5 and block[0, 1] == 1.0 / 3.0
        assert block[1, 0] == 0.25 and block[1, 1] == 2.0 / 3.0
        # weighted moment loss: identity and the single-deviating-moment case
        rng = np.random.default_rng(3)
        base = rng.standard_normal(100)
        base = base - base.mean() + 1.0
        from calibkit.losses import SeriesPanel

        real = SeriesPanel(base[None, :])
        assert moments_loss(real, [real]) == 0.0
        sim = SeriesPanel(base[None, :] + 1.0)
        assert moments_loss(real, [sim]) == pytest.approx(1.0 / 18.0, rel=1e-9)
        ok(1, "exact formula suite (reward, Q update, round robin, offline Q, Halton, moment loss)")


class TestCriterion2OracleEquivalence:
    def test_oracle_suite(self):
        from test_losses import brute_force_moments, dense_hp_oracle
        from test_surrogates import FIXED_GP, dense_gp_oracle, toy_gp_data

        rng = np.random.default_rng(0)
        # moments vs brute-force definition sums
        for _ in range(30):
            x = rng.uniform(-5, 5, int(rng.integers(12, 200)))
            assert np.allclose(compute_moments(x), brute_force_moments(x), atol=1e-10)
        # trend filter vs dense least squares
        for _ in range(5):
            x = rng.standard_normal(150).cumsum()
            trend, _ = hp_filter(x, 1600.0)
            assert np.max(np.abs(trend - dense_hp_oracle(x, 1600.0))) < 1e-8
        # GP posterior vs dense inverse
        from calibkit.surrogates import fit_gp, gp_posterior

        x, y = toy_gp_data()
        model = fit_gp(x, y, FIXED_GP)
        xq = rng.uniform(0, 1, (10, 2))
        mean, var = gp_posterior(model, xq)
        mean_o, var_o = dense_gp_oracle(model, x, y, xq)
        assert np.max(np.abs(mean - mean_o)) < 1e-8
        assert np.max(np.abs(var - var_o)) < 1e-8
        # offline Q vs brute-force accumulation
        history = [(int(rng.integers(0, 4)), float(rng.uniform(0, 1))) for _ in range(1000)]
        got = offline_q(history)
        for arm in range(4):
            rewards = [r for a, r in history if a == arm]
            assert abs(got[arm] - sum(rewards) / len(rewards)) < 1e-12
        # boosting: training MSE non-increasing over 50 random datasets
        for _ in range(50):
            n = int(rng.integers(10, 40))
            bx = rng.uniform(0, 1, (n, 2))
            by = rng.standard_normal(n)
            model = fit_boosted(bx, by, BoostConfig(n_rounds=8, learning_rate=0.5))
            pred = np.full(n, model.base_prediction)
            prev = np.mean((pred - by) ** 2)
            for tree in model.trees:
                pred = pred + model.learning_rate * tree.predict(bx)
                mse = np.mean((pred - by) ** 2)
                assert mse <= prev + 1e-12
                prev = mse
        ok(2, "oracle equivalence (moments, trend filter, GP posterior, offline Q, boosting MSE)")


class TestCriterion3ScaleStatement:
    def test_large_scale_results_not_reproduced(self):
        """The published large-scale benchmark numbers (best losses around
        7.8-16.9 on an 11-parameter macroeconomic simulator, from roughly
        600k simulations and 50+ CPU-days) require that external model and
        its data pipeline; they are intentionally NOT reproduced here.  The
        desk-scale analogs in criteria 4-6 test the same qualitative claims
        (surrogate search beats quasi-random, combinations help, the bandit
        scheduler matches the best single method) on models shipped in this
        package."""
        assert (CONFIGS / "bh4_benchmark.yaml").exists()
        assert (CONFIGS / "sir_benchmark.yaml").exists()
        ok(3, "large-scale results replaced by desk-scale analogs (criteria 4-6)")


class TestCriterion4SamplerOrdering:
    def test_rf_beats_halton_paired(self, bh4_benchmark):
        result, _ = bh4_benchmark
        h = result.stats["H"].finals
        rf = result.stats["RF"].finals
        test = ttest_rel(h, rf, alternative="greater")
        assert result.stats["RF"].mean_final < result.stats["H"].mean_final
        assert test.pvalue < 0.05, f"paired one-sided p={test.pvalue:.4f}, H={h}, RF={rf}"
        ok(4, f"RF beats Halton (mean {result.stats['RF'].mean_final:.3f} vs "
              f"{result.stats['H'].mean_final:.3f}, paired one-sided p={test.pvalue:.4f})")


class TestCriterion5CombinationBenefit:
    def test_round_robin_on_par_with_rf(self, bh4_benchmark):
        result, _ = bh4_benchmark
        rr = result.stats["RR-RF+BB"].mean_final
        rf = result.stats["RF"].mean_final
        assert rr <= rf * 1.05, f"RR {rr:.4f} vs RF {rf:.4f}"
        ok(5, f"round-robin RF+BB on par or better (RR {rr:.3f} <= RF {rf:.3f} x 1.05)")


class TestCriterion6BanditParity:
    def test_bandit_matches_best_single_bh4(self, bh4_benchmark):
        result, _ = bh4_benchmark
        rl = result.stats["RL-RF+XB+BB"].mean_final
        best_single = min(result.stats[k].mean_final for k in ("RF", "XB", "BB"))
        assert rl <= best_single * 1.10, f"RL {rl:.4f} vs best single {best_single:.4f}"
        ok(6, f"bandit parity on the asset-pricing task (RL {rl:.3f} <= {best_single:.3f} x 1.10)")

    def test_bandit_matches_best_single_sir(self, sir_benchmark):
        result, _ = sir_benchmark
        rl = result.stats["RL-RF+XB+BB"].mean_final
        best_single = min(result.stats[k].mean_final for k in ("RF", "XB", "BB"))
        assert rl <= best_single * 1.10, f"RL {rl:.4f} vs best single {best_single:.4f}"
        ok(6, f"bandit parity on the epidemic task (RL {rl:.4f} <= {best_single:.4f} x 1.10)")


class TestCriterion7BanditAdaptivity:
    def test_two_phase_environment(self):
        from test_scheduler import run_two_phase_environment

        late_shares = [
            np.mean(run_two_phase_environment(seed)[149:200] == 1) for seed in range(100)
        ]
        share = float(np.mean(late_shares))
        assert share > 0.6
        ok(7, f"two-phase adaptivity ({share:.1%} late-phase selection of the newly rewarding arm)")


class TestCriterion8OfflineContextual:
    def test_constructed_fixture_exact(self):
        def step(i, arm, best, reward):
            return TraceStep(i, arm, best, best, reward)

        high = [step(i, "A", 10.0, 0.5) for i in range(3)] + [step(3, "B", 10.0, 0.0)]
        low = [step(i, "B", 1.0, 0.25) for i in range(4, 7)] + [step(7, "A", 1.0, 0.0)]
        out = offline_q_contextual([high + low])
        assert out["high"]["A"] == pytest.approx(0.5, abs=1e-15)
        assert out["high"]["B"] == 0.0
        assert out["low"]["B"] == pytest.approx(0.25, abs=1e-15)
        assert out["low"]["A"] == 0.0

    def test_real_traces_have_full_schema(self, bh4_benchmark):
        result, _ = bh4_benchmark
        traces = [res.trace for res in result.results.values() if res.trace]
        table = summarize_traces(traces)
        assert set(table["columns"]) == {"single", "global", "high", "low"}
        for arm in ("RF", "XB", "BB"):
            assert arm in table["arms"]
            assert table["columns"]["global"].get(arm) is not None
            assert table["columns"]["single"].get(arm) is not None
        ok(8, "offline contextual analysis exact on the fixture; full arms x "
              "{single, global, high, low} table on real benchmark traces")


class TestCriterion9Determinism:
    def test_shipped_config_byte_identical_across_workers(self, tmp_path):
        digests = {}
        for workers in (1, 8):
            for attempt in ("a", "b"):
                out = tmp_path / f"w{workers}{attempt}"
                code = cli_main(
                    [
                        "calibrate",
                        str(CONFIGS / "quickstart_sphere.yaml"),
                        "--output",
                        str(out),
                        "--workers",
                        str(workers),
                    ]
                )
                assert code == 0
                digests[(workers, attempt)] = (
                    (out / "convergence.csv").read_bytes(),
                    (out / "trace.csv").read_bytes(),
                    (out / "checkpoint.txt").read_bytes(),
                )
        reference = digests[(1, "a")]
        assert all(d == reference for d in digests.values())
        ok(9, "quickstart run byte-identical across reruns and worker pools {1, 8}")


class TestCriterion10PropertySuites:
    def test_property_suites_present_and_counted(self):
        """The module-level invariants live as hypothesis property tests in
        the per-module test files (grid closure, loss non-negativity and
        scale invariance, filter linearity, surrogate bounds and symmetry,
        sampler novelty, reward range, conservation laws, round trips);
        they run with the main suite.  This check enumerates them so a
        regression that deletes one fails loudly."""
        test_dir = Path(__file__).parent
        given_uses = 0
        for path in test_dir.glob("test_*.py"):
            if path.name == "test_acceptance.py":
                continue
            given_uses += len(re.findall(r"@given\(", path.read_text()))
        assert given_uses >= 25, f"expected >= 25 property tests, found {given_uses}"
        ok(10, f"{given_uses} hypothesis property suites run with the module tests")
