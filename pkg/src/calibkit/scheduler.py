"""Arm selection for the calibration loop.

Per batch the scheduler picks which sampler runs next.  The interesting
policy is a non-stationary multi-armed bandit: the reward is the fractional
improvement of the batch's best loss over the previous global best, arm
values are exponentially weighted moving averages of those rewards, and
selection is epsilon-greedy.  Exponential weighting forgets old rewards,
which is what lets the agent drop a sampler once it plateaus and move to
whichever one is currently paying.

Round-robin alternation and offline sample-average value estimation over
recorded traces live here too, the latter with an optional two-context
split at the median best-loss level.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# canonical display order for arms in tables and traces
ARM_ORDER = ("H", "RF", "XB", "GP", "BB", "RND")


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def compute_reward(prev_best, batch_min_loss):
    """Fractional improvement of the batch over the previous best loss,
    floored at zero: max(0, (prev_best - batch_min) / prev_best).

    A non-positive or non-finite previous best cannot be improved upon
    fractionally; those degenerate baselines yield reward 0 with a logged
    event.
    """
    if not math.isfinite(prev_best) or prev_best <= 0.0:
        logger.warning("degenerate reward baseline prev_best=%r; emitting reward 0", prev_best)
        return 0.0
    if not math.isfinite(batch_min_loss):
        return 0.0
    return max(0.0, (prev_best - batch_min_loss) / prev_best)


@dataclass
class BanditState:
    """Epsilon-greedy bandit over sampler arms with fixed learning rate."""

    arms: tuple
    epsilon: float
    alpha: float
    q: np.ndarray = None
    t: int = 0
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.arms = tuple(self.arms)
        if len(self.arms) == 0:
            raise ValueError("bandit needs at least one arm")
        if len(set(self.arms)) != len(self.arms):
            raise ValueError("duplicate arms")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.q is None:
            self.q = np.zeros(len(self.arms))
        else:
            self.q = np.asarray(self.q, dtype=float)
        if len(self.trace) != self.t:
            raise ValueError("trace length must equal the step counter")


def select_arm(state, rng):
    """Epsilon-greedy arm index: greedy argmax with uniform tie-breaking,
    or a uniform random arm with probability epsilon (which may coincide
    with the greedy arm)."""
    n = len(state.arms)
    if rng.random() < state.epsilon:
        return int(rng.integers(0, n))
    maximizers = np.flatnonzero(state.q == state.q.max())
    return int(maximizers[rng.integers(0, len(maximizers))])


def update_q(state, arm, reward):
    """Apply Q <- alpha * R + (1 - alpha) * Q to the chosen arm only and
    append to the trace.  Returns the updated state."""
    if not 0 <= arm < len(state.arms):
        raise ValueError(f"arm index {arm} out of range")
    if not 0.0 <= reward <= 1.0:
        raise ValueError(f"reward {reward} outside [0, 1]")
    state.q[arm] = state.alpha * reward + (1.0 - state.alpha) * state.q[arm]
    state.t += 1
    state.trace.append((arm, float(reward)))
    return state


def round_robin_select(step, arms):
    """Naive alternation: arms[step mod len(arms)]."""
    if len(arms) == 0:
        raise ValueError("round robin needs at least one arm")
    return step % len(arms)


def offline_q(history):
    """Sample-average value per arm over an (arm, reward) history.

    Arms that never appear report None (not available).
    """
    sums = {}
    counts = {}
    for arm, reward in history:
        sums[arm] = sums.get(arm, 0.0) + reward
        counts[arm] = counts.get(arm, 0) + 1
    return {arm: sums[arm] / counts[arm] for arm in sums}


@dataclass(frozen=True)
class TraceStep:
    """One scheduler decision: the arm taken, the reward received and the
    best loss after the batch was applied."""

    step: int
    arm: str
    batch_min_loss: float
    best_loss: float
    reward: float


def offline_q_contextual(traces, pooled_median=True):
    """Per-arm sample-average values split into high and low loss contexts.

    Steps from all traces are pooled; the median of their best-loss levels
    separates a high context (strictly above the median) from a low one.
    With pooled_median=False each trace is split at its own median instead.

    Returns {"median": value or per-trace list, "high": {arm: Q},
    "low": {arm: Q}}.
    """
    all_steps = [step for trace in traces for step in trace]
    if not all_steps:
        raise ValueError("no steps in any trace")
    if pooled_median:
        median = float(np.median([s.best_loss for s in all_steps]))
        high = [(s.arm, s.reward) for s in all_steps if s.best_loss > median]
        low = [(s.arm, s.reward) for s in all_steps if s.best_loss <= median]
    else:
        median = []
        high, low = [], []
        for trace in traces:
            if not trace:
                continue
            m = float(np.median([s.best_loss for s in trace]))
            median.append(m)
            high.extend((s.arm, s.reward) for s in trace if s.best_loss > m)
            low.extend((s.arm, s.reward) for s in trace if s.best_loss <= m)
    return {"median": median, "high": offline_q(high), "low": offline_q(low)}


def summarize_traces(traces):
    """Table-ready offline analysis of scheduler traces.

    Per arm: the sample-average value over single-sampler traces only, over
    all traces, and within the high/low contexts of the pooled-median
    split.  Arms are listed in canonical order, then alphabetically.
    """
    single = [s for trace in traces if len({x.arm for x in trace}) == 1 for s in trace]
    everything = [s for trace in traces for s in trace]
    contexts = offline_q_contextual(traces)
    q_single = offline_q([(s.arm, s.reward) for s in single])
    q_global = offline_q([(s.arm, s.reward) for s in everything])
    arms = {s.arm for s in everything}
    ordered = [a for a in ARM_ORDER if a in arms] + sorted(arms - set(ARM_ORDER))
    return {
        "arms": ordered,
        "median": contexts["median"],
        "columns": {
            "single": q_single,
            "global": q_global,
            "high": contexts["high"],
            "low": contexts["low"],
        },
    }


# ---------------------------------------------------------------------------
# Trace file format
# ---------------------------------------------------------------------------

_TRACE_FIXED_COLUMNS = ("step", "arm", "batch_min_loss", "best_loss", "reward")


def write_trace_csv(steps, arms, q_history, path):
    """One row per scheduler step: decision, losses, reward and the Q vector
    after the update."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_TRACE_FIXED_COLUMNS) + [f"q_{a}" for a in arms])
        for step, q in zip(steps, q_history):
            writer.writerow(
                [
                    step.step,
                    step.arm,
                    repr(float(step.batch_min_loss)),
                    repr(float(step.best_loss)),
                    repr(float(step.reward)),
                ]
                + [repr(float(v)) for v in q]
            )


def read_trace_csv(path):
    """Parse a trace file back into a list of TraceStep."""
    steps = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(path, 1, "empty trace file") from None
        if header[: len(_TRACE_FIXED_COLUMNS)] != list(_TRACE_FIXED_COLUMNS):
            raise TraceFormatError(path, 1, f"unexpected header {header!r}")
        for i, row in enumerate(reader, start=2):
            if len(row) < len(_TRACE_FIXED_COLUMNS):
                raise TraceFormatError(path, i, f"expected at least {len(_TRACE_FIXED_COLUMNS)} columns")
            try:
                steps.append(
                    TraceStep(int(row[0]), row[1], float(row[2]), float(row[3]), float(row[4]))
                )
            except ValueError as exc:
                raise TraceFormatError(path, i, f"malformed value: {exc}") from None
    return steps
