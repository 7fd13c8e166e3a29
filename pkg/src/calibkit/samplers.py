"""Search methods proposing batches of candidate parameter vectors.

Six samplers sit behind one interface: quasi-random Halton coverage (H), a
uniform-random baseline (RND), three surrogate-guided methods that refit an
interpolator of the loss surface every batch and propose near its low
region (RF on a random-forest classifier, XB on boosted trees, GP on a
Gaussian process with expected improvement), and an evolutionary best-batch
method (BB) that randomly perturbs the current lowest-loss points.

Every proposal batch is grid-aligned, in-bounds, mutually distinct and
novel with respect to the evaluation history.  A sampler whose raw
proposals collide with known points is re-queried a bounded number of
times, after which the batch is completed with uniform-random unseen grid
points.
"""

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from calibkit.core import GridExhaustedError, InsufficientDataError
from calibkit.surrogates import (
    BoostConfig,
    ForestConfig,
    GPConfig,
    SingularKernelError,
    expected_improvement,
    fit_boosted,
    fit_forest,
    fit_gp,
)

logger = logging.getLogger(__name__)

SAMPLER_IDS = ("H", "RF", "XB", "GP", "BB", "RND")

_MAX_REQUERIES = 10
_ENUMERATION_LIMIT = 1_000_000


@dataclass(frozen=True)
class SamplerContext:
    """Read-only view of a calibration handed to a sampler for one batch."""

    space: object
    params: np.ndarray
    losses: np.ndarray
    seen: frozenset
    batch_size: int
    rng: np.random.Generator

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_state(cls, state, batch_size, rng):
        return cls(state.space, state.params_array(), state.losses_array(), state.seen_indices, batch_size, rng)

    @property
    def n_evaluated(self):
        return len(self.losses)


def first_primes(count):
    primes = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % p for p in primes):
            primes.append(candidate)
        candidate += 1
    return primes


def radical_inverse(indices, base):
    """Van der Corput radical inverse of integer indices in the given base."""
    i = np.asarray(indices, dtype=np.int64).copy()
    out = np.zeros(i.shape, dtype=float)
    f = 1.0
    while np.any(i > 0):
        f /= base
        out += f * (i % base)
        i //= base
    return out


def halton_block(start_index, count, bases):
    """Rows start_index .. start_index+count-1 of the Halton sequence."""
    idx = np.arange(start_index, start_index + count, dtype=np.int64)
    return np.column_stack([radical_inverse(idx, b) for b in bases])


class Sampler:
    """Base class enforcing the proposal contract.

    Subclasses implement _propose_indices returning candidate grid-index
    rows; this class handles novelty filtering, bounded re-querying and the
    uniform-random fallback fill.
    """

    id = "?"

    def propose(self, ctx):
        """Batch of ctx.batch_size novel grid-aligned coordinate rows."""
        space = ctx.space
        available = space.n_grid_points - len(ctx.seen)
        if available < ctx.batch_size:
            raise GridExhaustedError(
                f"grid has {available} unseen points, batch needs {ctx.batch_size}"
            )
        chosen = []
        taken = set(ctx.seen)
        for _ in range(_MAX_REQUERIES):
            need = ctx.batch_size - len(chosen)
            if need == 0:
                break
            for row in self._propose_indices(ctx, need):
                key = tuple(int(k) for k in row)
                if key not in taken:
                    taken.add(key)
                    chosen.append(key)
                    if len(chosen) == ctx.batch_size:
                        break
        if len(chosen) < ctx.batch_size:
            _uniform_fill(space, ctx.rng, taken, chosen, ctx.batch_size)
        return space.coords_of_indices(np.array(chosen, dtype=np.int64))

    def _propose_indices(self, ctx, need):
        raise NotImplementedError

    def state_dict(self):
        return {}

    def load_state(self, state):
        pass


def _uniform_fill(space, rng, taken, chosen, batch_size):
    """Complete a batch with uniform-random unseen grid points."""
    n_points = np.array([d.n_points for d in space.dims])
    for _ in range(10_000):
        if len(chosen) == batch_size:
            return
        key = tuple(int(rng.integers(0, n)) for n in n_points)
        if key not in taken:
            taken.add(key)
            chosen.append(key)
    if space.n_grid_points <= _ENUMERATION_LIMIT:
        ranges = [range(d.n_points) for d in space.dims]
        for key in itertools.product(*ranges):
            if len(chosen) == batch_size:
                return
            if key not in taken:
                taken.add(key)
                chosen.append(key)
    if len(chosen) < batch_size:
        raise GridExhaustedError("could not fill batch with unseen grid points")


class HaltonSampler(Sampler):
    """Low-discrepancy coverage of the box via the Halton sequence.

    Dimension i uses the i-th prime as base.  The sequence cursor starts at
    index 1 and persists across calls, so consecutive batches never reuse
    sequence indices.
    """

    id = "H"

    def __init__(self):
        self.cursor = 1

    def _propose_indices(self, ctx, need):
        space = ctx.space
        bases = first_primes(space.dimension)
        u = halton_block(self.cursor, need, bases)
        self.cursor += need
        raw = space.lowers + u * (space.uppers - space.lowers)
        return space.snap_indices(raw)

    def state_dict(self):
        return {"cursor": self.cursor}

    def load_state(self, state):
        self.cursor = int(state["cursor"])


class RandomSampler(Sampler):
    """Uniform-random draws over the grid; the test baseline."""

    id = "RND"

    def _propose_indices(self, ctx, need):
        n_points = [d.n_points for d in ctx.space.dims]
        return np.column_stack([ctx.rng.integers(0, n, size=need) for n in n_points])


class BestBatchSampler(Sampler):
    """Random perturbations of the current elite points.

    Picks one of the E lowest-loss records (E = elite_factor * batch_size)
    and shifts every coordinate by u * delta * range with u uniform in
    [-1, 1], clipping to bounds and snapping to the grid.  The perturbation
    is resampled until the snapped point differs from its elite.
    """

    id = "BB"

    def __init__(self, delta=0.05, elite_factor=5, perturb_fraction=1.0):
        if delta < 0:
            raise ValueError("delta must be non-negative")
        self.delta = delta
        self.elite_factor = elite_factor
        self.perturb_fraction = perturb_fraction

    def _elites(self, ctx):
        if ctx.n_evaluated == 0:
            raise InsufficientDataError("best-batch sampler needs a non-empty history")
        n_elite = min(self.elite_factor * ctx.batch_size, ctx.n_evaluated)
        order = np.argsort(ctx.losses, kind="stable")[:n_elite]
        return ctx.params[order]

    def perturb(self, space, rng, elite, require_distinct=True):
        elite_idx = space.snap_indices(elite[None, :])[0]
        span = self.delta * (space.uppers - space.lowers)
        for _ in range(1000):
            u = rng.uniform(-1.0, 1.0, size=space.dimension)
            if self.perturb_fraction < 1.0:
                mask = rng.random(space.dimension) < self.perturb_fraction
                u = u * mask
            cand = space.snap_indices((elite + u * span)[None, :])[0]
            if not require_distinct or not np.array_equal(cand, elite_idx):
                return cand
        return None

    def _propose_indices(self, ctx, need):
        elites = self._elites(ctx)
        out = []
        for _ in range(need):
            elite = elites[ctx.rng.integers(0, len(elites))]
            cand = self.perturb(ctx.space, ctx.rng, elite, require_distinct=self.delta > 0)
            if cand is not None:
                out.append(cand)
        return np.array(out, dtype=np.int64) if out else np.empty((0, ctx.space.dimension), dtype=np.int64)


class SurrogateSampler(Sampler):
    """Propose the top-scoring points of a quasi-random candidate pool under
    a loss-surface surrogate refitted on the evaluation history.

    Short histories (fewer than max(2, K) points for the forest, fewer than
    2 otherwise) and surrogate fit failures fall back to an internal Halton
    sampler, the latter with a logged warning.
    """

    KINDS = ("forest", "boosted", "gp")

    def __init__(self, kind, pool_size=4096, forest=None, boost=None, gp=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown surrogate kind {kind!r}")
        self.kind = kind
        self.id = {"forest": "RF", "boosted": "XB", "gp": "GP"}[kind]
        self.pool_size = pool_size
        self.forest_config = forest or ForestConfig()
        self.boost_config = boost or BoostConfig()
        self.gp_config = gp or GPConfig()
        self._fallback = HaltonSampler()
        self.pool_cursor = 1

    @property
    def min_history(self):
        if self.kind == "forest":
            return max(2, self.forest_config.n_quantile_bins)
        return 2

    def _candidate_pool(self, ctx):
        space = ctx.space
        bases = first_primes(space.dimension)
        u = halton_block(self.pool_cursor, self.pool_size, bases)
        self.pool_cursor += self.pool_size
        raw = space.lowers + u * (space.uppers - space.lowers)
        idx = space.snap_indices(raw)
        keys = [tuple(int(k) for k in row) for row in idx]
        fresh = [k for k in dict.fromkeys(keys) if k not in ctx.seen]
        return np.array(fresh, dtype=np.int64) if fresh else np.empty((0, space.dimension), dtype=np.int64)

    def _scores(self, ctx, pool_coords, params, losses):
        if self.kind == "forest":
            model = fit_forest(params, losses, self.forest_config, ctx.rng)
            return model.predict_score(pool_coords)
        if self.kind == "boosted":
            model = fit_boosted(params, losses, self.boost_config)
            return model.predict(pool_coords)
        gp_config = self.gp_config
        if gp_config.bounds is None:
            from dataclasses import replace

            gp_config = replace(gp_config, bounds=(ctx.space.lowers, ctx.space.uppers))
        model = fit_gp(params, losses, gp_config)
        # expected improvement is maximized; negate into an ascending score
        return -expected_improvement(model, pool_coords, best=float(np.min(losses)))

    def _propose_indices(self, ctx, need):
        finite = np.isfinite(ctx.losses)
        if int(finite.sum()) < self.min_history:
            return self._fallback._propose_indices(ctx, need)
        pool = self._candidate_pool(ctx)
        if len(pool) == 0:
            return pool
        pool_coords = ctx.space.coords_of_indices(pool)
        try:
            scores = self._scores(ctx, pool_coords, ctx.params[finite], ctx.losses[finite])
        except (SingularKernelError, InsufficientDataError, np.linalg.LinAlgError) as exc:
            logger.warning("%s surrogate fit failed (%s); falling back to Halton", self.id, exc)
            return self._fallback._propose_indices(ctx, need)
        order = np.lexsort((ctx.rng.random(len(pool)), scores))
        return pool[order[:need]]

    def state_dict(self):
        return {"pool_cursor": self.pool_cursor, "fallback": self._fallback.state_dict()}

    def load_state(self, state):
        self.pool_cursor = int(state["pool_cursor"])
        self._fallback.load_state(state["fallback"])


def make_sampler(sampler_id, options=None):
    """Instantiate a sampler by its two-letter id with optional knobs."""
    options = dict(options or {})
    if sampler_id in ("H", "RND"):
        if options:
            raise ValueError(f"sampler {sampler_id} takes no options, got {sorted(options)}")
        return HaltonSampler() if sampler_id == "H" else RandomSampler()
    if sampler_id == "BB":
        sampler = BestBatchSampler(
            delta=options.pop("delta", 0.05),
            elite_factor=options.pop("elite_factor", 5),
            perturb_fraction=options.pop("perturb_fraction", 1.0),
        )
        if options:
            raise ValueError(f"unknown sampler options for BB: {sorted(options)}")
        return sampler
    if sampler_id in ("RF", "XB", "GP"):
        kind = {"RF": "forest", "XB": "boosted", "GP": "gp"}[sampler_id]
        pool_size = options.pop("pool_size", 4096)
        forest = boost = gp = None
        if sampler_id == "RF":
            forest = ForestConfig(
                n_trees=options.pop("n_trees", 100),
                max_depth=options.pop("max_depth", None),
                min_samples_leaf=options.pop("min_samples_leaf", 2),
                n_quantile_bins=options.pop("n_quantile_bins", 10),
            )
        elif sampler_id == "XB":
            boost = BoostConfig(
                n_rounds=options.pop("n_rounds", 200),
                learning_rate=options.pop("learning_rate", 0.1),
                max_depth=options.pop("max_depth", 3),
            )
        else:
            gp = GPConfig(max_train=options.pop("max_train", 500))
        if options:
            raise ValueError(f"unknown sampler options for {sampler_id}: {sorted(options)}")
        return SurrogateSampler(kind, pool_size=pool_size, forest=forest, boost=boost, gp=gp)
    raise ValueError(f"unknown sampler id {sampler_id!r}; known ids: {SAMPLER_IDS}")
