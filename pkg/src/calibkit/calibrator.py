"""Orchestration of calibration runs and multi-run benchmarks.

One batch of a run: the scheduler picks a sampler (batch 0 is always drawn
by the Halton sampler and generates no reward), the sampler proposes
batch_size novel grid points, every point is simulated ensemble_size times
with per-index derived seeds (possibly across a worker pool, results
applied in deterministic point order), per-seed losses are averaged into
the point's loss, the batch's best loss is turned into a fractional
improvement reward, and the scheduler is updated.  A checkpoint, a
scheduler trace and a convergence curve are written every batch, so an
interrupted run resumes bit-identically.
"""

import concurrent.futures
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from calibkit.core import (
    LANE_SAMPLER,
    LANE_SCHEDULER,
    CalibrationState,
    EvaluationRecord,
    best_loss,
    checkpoint_load,
    checkpoint_save,
    derive_seed,
    stream_seed,
)
from calibkit.losses import (
    WeightSpec,
    euclidean_loss,
    moments_loss,
    panel_moments,
    preprocess_panel,
)
from calibkit.models import ModelExplosionError
from calibkit.samplers import SamplerContext, make_sampler
from calibkit.scheduler import (
    BanditState,
    TraceStep,
    compute_reward,
    round_robin_select,
    select_arm,
    update_q,
    write_trace_csv,
)

logger = logging.getLogger(__name__)


class CalibrationRunError(RuntimeError):
    """A batch could not be evaluated (for example, every point diverged)."""


# ---------------------------------------------------------------------------
# Strategy: which sampler runs each batch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Strategy:
    """Sampler-selection policy: one fixed sampler, a round-robin cycle or
    an epsilon-greedy bandit over the listed arms."""

    kind: str
    arms: tuple
    epsilon: float = 0.1
    alpha: float = 0.1
    sampler_options: dict = field(default_factory=dict)
    label: str = None

    def __post_init__(self):
        if self.kind not in ("single", "round_robin", "bandit"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if len(self.arms) == 0:
            raise ValueError("strategy needs at least one arm")
        if self.kind == "single" and len(self.arms) != 1:
            raise ValueError("single strategy takes exactly one arm")
        object.__setattr__(self, "arms", tuple(self.arms))
        if self.label is None:
            name = {"single": self.arms[0], "round_robin": "RR-" + "+".join(self.arms), "bandit": "RL-" + "+".join(self.arms)}
            object.__setattr__(self, "label", name[self.kind])


class _Scheduler:
    arms = ()

    def select(self, scheduled_step, rng):
        raise NotImplementedError

    def update(self, arm_index, reward):
        pass

    @property
    def q_values(self):
        return None

    def state_dict(self):
        return {}

    def load_state(self, state):
        pass


class _SingleScheduler(_Scheduler):
    def __init__(self, arm):
        self.arms = (arm,)

    def select(self, scheduled_step, rng):
        return 0


class _RoundRobinScheduler(_Scheduler):
    def __init__(self, arms):
        self.arms = tuple(arms)

    def select(self, scheduled_step, rng):
        return round_robin_select(scheduled_step, self.arms)


class _BanditScheduler(_Scheduler):
    def __init__(self, arms, epsilon, alpha):
        self.state = BanditState(tuple(arms), epsilon=epsilon, alpha=alpha)
        self.arms = self.state.arms

    def select(self, scheduled_step, rng):
        return select_arm(self.state, rng)

    def update(self, arm_index, reward):
        update_q(self.state, arm_index, reward)

    @property
    def q_values(self):
        return self.state.q.copy()

    def state_dict(self):
        return {"q": self.state.q.tolist(), "t": self.state.t, "trace": self.state.trace}

    def load_state(self, state):
        self.state.q = np.asarray(state["q"], dtype=float)
        self.state.t = int(state["t"])
        self.state.trace = [tuple(x) for x in state["trace"]]


def _build_scheduler(strategy):
    if strategy.kind == "single":
        return _SingleScheduler(strategy.arms[0])
    if strategy.kind == "round_robin":
        return _RoundRobinScheduler(strategy.arms)
    return _BanditScheduler(strategy.arms, strategy.epsilon, strategy.alpha)


# ---------------------------------------------------------------------------
# Loss evaluation of a single candidate point
# ---------------------------------------------------------------------------


@dataclass
class LossEvaluator:
    """Per-seed loss of a simulated panel against the fixed target panel.

    The same preprocessing transforms applied to the target are applied to
    every simulated panel before comparison.  Real moments and weights are
    computed once.
    """

    target: object
    kind: str = "moments"
    weight_floor: float = 1e-12
    preprocess: dict = field(default_factory=dict)
    _real_moments: np.ndarray = field(default=None, repr=False)
    _weights: WeightSpec = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("moments", "euclidean"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "moments":
            self._real_moments = panel_moments(self.target)
            self._weights = WeightSpec.from_real_moments(self._real_moments, self.weight_floor)

    def __call__(self, sim_panel):
        if self.preprocess:
            sim_panel = preprocess_panel(sim_panel, self.preprocess)
        if self.kind == "moments":
            return moments_loss(
                self.target, [sim_panel], weights=self._weights, real_moments=self._real_moments
            )
        return euclidean_loss(self.target, [sim_panel])


def _evaluate_point(model, evaluator, params, n_steps, burn_in, seeds):
    """Ensemble losses for one candidate; a diverged simulation marks the
    whole point as failed with an infinite sentinel."""
    try:
        panels = model.simulate_ensemble(np.asarray(params), n_steps, burn_in, seeds)
    except ModelExplosionError as exc:
        logger.warning("simulation diverged at %s: %s", tuple(params), exc)
        return [math.inf] * len(seeds)
    return [evaluator(panel) for panel in panels]


# ---------------------------------------------------------------------------
# Calibration run
# ---------------------------------------------------------------------------


@dataclass
class CalibrationConfig:
    """Everything one calibration run needs.

    ``target`` is the (already preprocessed) panel the model is calibrated
    against; ``preprocess`` holds the transforms re-applied to each
    simulated panel.
    """

    model: object
    space: object
    target: object
    strategy: Strategy
    loss_kind: str = "moments"
    weight_floor: float = 1e-12
    preprocess: dict = field(default_factory=dict)
    batch_size: int = 4
    ensemble_size: int = 5
    n_batches: int = 100
    n_steps: int = 100
    burn_in: int = 0
    master_seed: int = 0
    workers: int = 1
    output_dir: Path = None

    def __post_init__(self):
        if self.batch_size < 1 or self.ensemble_size < 1 or self.n_batches < 1:
            raise ValueError("batch_size, ensemble_size and n_batches must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)


@dataclass
class CalibrationResult:
    state: CalibrationState
    trace: list
    q_history: list
    arms: tuple
    convergence: list  # (batch_index, evaluations, best_loss)

    @property
    def best(self):
        return best_loss(self.state)


def _scheduler_blob(scheduler, samplers, trace, q_history):
    payload = {
        "format": 1,
        "scheduler": scheduler.state_dict(),
        "samplers": {sid: s.state_dict() for sid, s in samplers.items()},
        "trace": [[s.step, s.arm, s.batch_min_loss, s.best_loss, s.reward] for s in trace],
        "q_history": [list(map(float, q)) for q in q_history],
    }
    return json.dumps(payload, sort_keys=True).encode("ascii")


def _restore_from_blob(blob, scheduler, samplers):
    payload = json.loads(blob.decode("ascii"))
    scheduler.load_state(payload["scheduler"])
    for sid, state in payload["samplers"].items():
        if sid in samplers:
            samplers[sid].load_state(state)
    trace = [TraceStep(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4])) for r in payload["trace"]]
    q_history = [np.asarray(q) for q in payload["q_history"]]
    return trace, q_history


def _write_convergence(path, convergence):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_index", "evaluations_so_far", "best_loss"])
        for batch_index, evals, best in convergence:
            writer.writerow([batch_index, evals, repr(float(best))])


def run_calibration(config, resume_from=None, progress=None):
    """Execute a calibration run; optionally resume from a checkpoint.

    With ``output_dir`` set, writes checkpoint.txt, trace.csv and
    convergence.csv after every batch.  ``progress`` receives
    (batch_index, arm_id, batch_min_loss, best_loss) per batch.
    """
    model, space = config.model, config.space
    evaluator = LossEvaluator(config.target, config.loss_kind, config.weight_floor, config.preprocess)
    scheduler = _build_scheduler(config.strategy)
    samplers = {"H": make_sampler("H", None)}
    for arm in scheduler.arms:
        if arm not in samplers:
            samplers[arm] = make_sampler(arm, config.strategy.sampler_options.get(arm))

    trace, q_history = [], []
    if resume_from is not None:
        state, blob = checkpoint_load(resume_from)
        if state.space != space:
            raise CalibrationRunError("checkpoint space does not match the configuration")
        if state.master_seed != config.master_seed:
            raise CalibrationRunError("checkpoint master seed does not match the configuration")
        trace, q_history = _restore_from_blob(blob, scheduler, samplers)
    else:
        state = CalibrationState(space, master_seed=config.master_seed)

    convergence = _rebuild_convergence(state, config.batch_size)
    out_dir = config.output_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    pool = None
    try:
        if config.workers > 1:
            pool = concurrent.futures.ProcessPoolExecutor(max_workers=config.workers)
        for batch_index in range(state.batch_count, config.n_batches):
            _run_batch(config, state, scheduler, samplers, evaluator, batch_index, trace, q_history, pool)
            running_best = best_loss(state)[0]
            convergence.append((batch_index, (batch_index + 1) * config.batch_size, running_best))
            if out_dir is not None:
                checkpoint_save(state, _scheduler_blob(scheduler, samplers, trace, q_history), out_dir / "checkpoint.txt")
                write_trace_csv(trace, scheduler.arms if scheduler.q_values is not None else (), q_history, out_dir / "trace.csv")
                _write_convergence(out_dir / "convergence.csv", convergence)
            if progress is not None:
                last_arm = trace[-1].arm if trace else "H"
                batch_min = trace[-1].batch_min_loss if trace else running_best
                progress(batch_index, last_arm, batch_min, running_best)
    finally:
        if pool is not None:
            pool.shutdown()
    return CalibrationResult(state, trace, q_history, scheduler.arms, convergence)


def _rebuild_convergence(state, batch_size):
    convergence = []
    running = math.inf
    by_batch = {}
    for record in state.records:
        by_batch.setdefault(record.batch_index, []).append(record.loss)
    for batch_index in range(state.batch_count):
        running = min(running, min(by_batch.get(batch_index, [math.inf])))
        convergence.append((batch_index, (batch_index + 1) * batch_size, running))
    return convergence


def _run_batch(config, state, scheduler, samplers, evaluator, batch_index, trace, q_history, pool):
    sampler_rng = np.random.default_rng(stream_seed(config.master_seed, LANE_SAMPLER, batch_index))
    if batch_index == 0:
        arm_index, sampler = None, samplers["H"]
    else:
        scheduler_rng = np.random.default_rng(stream_seed(config.master_seed, LANE_SCHEDULER, batch_index))
        arm_index = scheduler.select(batch_index - 1, scheduler_rng)
        sampler = samplers[scheduler.arms[arm_index]]

    ctx = SamplerContext.from_state(state, config.batch_size, sampler_rng)
    points = sampler.propose(ctx)

    prev_best = best_loss(state)[0] if state.records else math.inf
    tasks = [
        (
            tuple(points[p]),
            [derive_seed(config.master_seed, batch_index, p, e) for e in range(config.ensemble_size)],
        )
        for p in range(len(points))
    ]
    if pool is not None:
        futures = [
            pool.submit(_evaluate_point, config.model, evaluator, params, config.n_steps, config.burn_in, seeds)
            for params, seeds in tasks
        ]
        results = [f.result() for f in futures]
    else:
        results = [
            _evaluate_point(config.model, evaluator, params, config.n_steps, config.burn_in, seeds)
            for params, seeds in tasks
        ]

    batch_losses = []
    for (params, _), ensemble in zip(tasks, results):
        record = EvaluationRecord.from_ensemble(params, batch_index, sampler.id, ensemble)
        state.append(record)
        batch_losses.append(record.loss)
    state.batch_count = batch_index + 1

    if all(not math.isfinite(v) for v in batch_losses):
        raise CalibrationRunError(
            f"all {len(batch_losses)} points of batch {batch_index} failed to simulate"
        )

    if batch_index > 0:
        batch_min = min(batch_losses)
        if not math.isfinite(prev_best):
            # every earlier point failed: any finite loss is a full improvement
            reward = 1.0 if math.isfinite(batch_min) else 0.0
        elif prev_best <= 0.0:
            reward = 0.0  # loss already perfect, nothing left to improve
        else:
            reward = compute_reward(prev_best, batch_min)
        scheduler.update(arm_index, reward)
        q = scheduler.q_values
        trace.append(
            TraceStep(
                batch_index,
                scheduler.arms[arm_index],
                float(batch_min),
                float(best_loss(state)[0]),
                float(reward),
            )
        )
        q_history.append(q if q is not None else np.empty(0))


# ---------------------------------------------------------------------------
# Benchmarks: repeated paired runs across strategies
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    """A bundle of strategies run under a shared seed schedule, so that
    strategy comparisons are paired (identical Halton bootstrap batches and
    identical simulation seeds per repetition)."""

    base: CalibrationConfig
    strategies: list
    repetitions: int = 3
    seed_schedule: list = None
    output_dir: Path = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.strategies:
            raise ValueError("benchmark needs at least one strategy")
        labels = [s.label for s in self.strategies]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate strategy labels: {labels}")
        if self.seed_schedule is None:
            self.seed_schedule = [self.base.master_seed + r for r in range(self.repetitions)]
        if len(self.seed_schedule) != self.repetitions:
            raise ValueError("seed_schedule length must equal repetitions")
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)


@dataclass
class StrategyStats:
    label: str
    curves: np.ndarray  # repetitions x n_batches cumulative-minimum losses
    evaluations: np.ndarray

    @property
    def finals(self):
        return self.curves[:, -1]

    @property
    def mean_curve(self):
        return self.curves.mean(axis=0)

    @property
    def se_curve(self):
        reps = self.curves.shape[0]
        if reps < 2:
            return np.zeros(self.curves.shape[1])
        return self.curves.std(axis=0, ddof=1) / math.sqrt(reps)

    @property
    def mean_final(self):
        return float(self.finals.mean())

    @property
    def se_final(self):
        reps = len(self.finals)
        if reps < 2:
            return 0.0
        return float(self.finals.std(ddof=1) / math.sqrt(reps))


@dataclass
class BenchmarkResult:
    stats: dict  # label -> StrategyStats
    results: dict  # (label, rep) -> CalibrationResult

    def summary_rows(self):
        rows = []
        for label, stat in self.stats.items():
            for rep, final in enumerate(stat.finals):
                rows.append((label, rep, float(final), stat.mean_final, stat.se_final))
        return rows


def run_benchmark(config, progress=None):
    """Run repetitions x strategies calibrations and collect convergence
    statistics: per-repetition cumulative-minimum curves, the mean curve
    across repetitions and the standard error of the final best loss."""
    from dataclasses import replace

    stats, results = {}, {}
    for strategy in config.strategies:
        curves = []
        for rep in range(config.repetitions):
            out_dir = None
            if config.output_dir is not None:
                out_dir = config.output_dir / "runs" / _safe_name(strategy.label) / f"rep{rep}"
            run_config = replace(
                config.base,
                strategy=strategy,
                master_seed=config.seed_schedule[rep],
                output_dir=out_dir,
            )
            if progress is not None:
                progress(strategy.label, rep)
            result = run_calibration(run_config)
            results[(strategy.label, rep)] = result
            curves.append([c[2] for c in result.convergence])
        evaluations = np.array([c[1] for c in results[(strategy.label, 0)].convergence])
        stats[strategy.label] = StrategyStats(strategy.label, np.array(curves), evaluations)
    if config.output_dir is not None:
        write_benchmark_outputs(config.output_dir, stats)
    return BenchmarkResult(stats, results)


def _safe_name(label):
    return "".join(c if c.isalnum() or c in "+-_." else "_" for c in label)


def write_benchmark_outputs(out_dir, stats):
    """summary.csv (one row per run) and a mean/se curve CSV per strategy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "rep", "final_best", "mean_final", "se_final"])
        for label, stat in stats.items():
            for rep, final in enumerate(stat.finals):
                writer.writerow([label, rep, repr(float(final)), repr(stat.mean_final), repr(stat.se_final)])
    for label, stat in stats.items():
        with open(out_dir / f"curve_{_safe_name(label)}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch_index", "evaluations", "mean_best", "se_best"])
            mean, se = stat.mean_curve, stat.se_curve
            for b in range(len(mean)):
                writer.writerow([b, int(stat.evaluations[b]), repr(float(mean[b])), repr(float(se[b]))])
