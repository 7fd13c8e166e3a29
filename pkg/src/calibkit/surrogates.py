"""Loss-surface interpolators backing the machine-learning samplers.

Three surrogate families are implemented from scratch on numpy: a random
forest classifying points into loss-quantile bins, gradient-boosted
regression trees on squared error, and a Gaussian process with a squared
exponential kernel.  Trees use histogram split finding and level-wise
growth: features are bucketed once per fit (exactly, when a feature has
few distinct values) and every node on a level is split in one vectorized
pass, which keeps refitting cheap inside a calibration loop that retrains
every batch.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from calibkit.core import InsufficientDataError


class SingularKernelError(RuntimeError):
    """Kernel matrix stayed non-positive-definite after jitter escalation."""


# ---------------------------------------------------------------------------
# Histogram regression/classification trees
# ---------------------------------------------------------------------------

_SPLIT_EPS = 1e-9


@dataclass
class RegressionTree:
    """Flat-array binary tree.

    ``feature[i] < 0`` marks node i as a leaf; otherwise samples with
    x[feature] < threshold go left.  ``value`` holds the leaf payload for
    every node: a class-probability row for classification trees, a scalar
    mean for regression trees.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, x):
        """Leaf index reached by each row of x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            f = feat[rows]
            go_left = x[rows, f] < self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, x):
        return self.value[self.apply(x)]


def _bin_features(x, n_bins):
    """Per-feature candidate thresholds and integer codes.

    Features with at most n_bins distinct values are binned exactly at the
    midpoints between consecutive distinct values, so small datasets get the
    same splits an exhaustive search would find.
    """
    n, d = x.shape
    boundaries = []
    codes = np.empty((n, d), dtype=np.int64)
    for j in range(d):
        u = np.unique(x[:, j])
        if len(u) <= 1:
            b = np.empty(0)
        elif len(u) <= n_bins:
            b = (u[:-1] + u[1:]) / 2.0
        else:
            qs = np.quantile(x[:, j], np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
            b = np.unique(qs)
        boundaries.append(b)
        codes[:, j] = np.searchsorted(b, x[:, j], side="right")
    return codes, boundaries


def _grow_tree(codes, boundaries, y, n_classes, max_depth, min_samples_leaf, features_per_split, rng, sample_rows):
    """Level-wise CART on pre-binned features.

    Classification (n_classes set): Gini impurity on class counts.
    Regression (n_classes None): variance reduction on sums.  Both use the
    proxy score sum(stat^2)/count, maximized, which is equivalent.  Every
    node of a level is processed in one vectorized pass; node ids follow
    breadth-first order.
    """
    n, d = codes.shape
    classification = n_classes is not None
    n_out = n_classes if classification else 1
    feat_chunks, thr_chunks, left_chunks, right_chunks, val_chunks = [], [], [], [], []

    rows = sample_rows
    # node ids are assigned level-sequentially, so the local slot of a node
    # on its level is node_id - level_start
    node_of = np.zeros(len(rows), dtype=np.int64)
    level_start, n_level = 0, 1
    depth = 0
    max_depth = max_depth if max_depth is not None else 64

    while n_level:
        loc = node_of - level_start
        y_rows = y[rows]

        if classification:
            comp = loc * n_classes + y_rows
            totals = np.bincount(comp, minlength=n_level * n_classes).reshape(n_level, n_classes)
            counts = totals.sum(axis=1)
            nosplit = np.einsum("ac,ac->a", totals, totals) / np.maximum(counts, 1)
            pure = nosplit >= counts - 1e-12
            leaf_payload = totals / np.maximum(counts, 1)[:, None]
        else:
            counts = np.bincount(loc, minlength=n_level)
            sums = np.bincount(loc, weights=y_rows, minlength=n_level)
            sumsq = np.bincount(loc, weights=y_rows**2, minlength=n_level)
            nosplit = sums**2 / np.maximum(counts, 1)
            pure = sumsq - nosplit <= 1e-12 * np.maximum(sumsq, 1.0)
            leaf_payload = (sums / np.maximum(counts, 1))[:, None]

        splittable = (~pure) & (counts >= 2 * min_samples_leaf) & (depth < max_depth)

        best_score = np.full(n_level, -np.inf)
        best_feat = np.full(n_level, -1, dtype=np.int64)
        best_cut = np.full(n_level, -1, dtype=np.int64)

        if splittable.any():
            # histograms only over rows that belong to a splittable node
            act_nodes = np.flatnonzero(splittable)
            n_act = len(act_nodes)
            compact = np.full(n_level, -1, dtype=np.int64)
            compact[act_nodes] = np.arange(n_act)
            row_mask = splittable[loc]
            rows_h = rows[row_mask]
            loc_h = compact[loc[row_mask]]
            y_h = y_rows[row_mask]
            counts_a = counts[act_nodes]
            if features_per_split is None or features_per_split >= d:
                allowed = np.ones((n_act, d), dtype=bool)
            else:
                order = np.argsort(rng.random((n_act, d)), axis=1)
                allowed = np.zeros((n_act, d), dtype=bool)
                np.put_along_axis(allowed, order[:, :features_per_split], True, axis=1)
            score_a = np.full(n_act, -np.inf)
            feat_a = np.full(n_act, -1, dtype=np.int64)
            cut_a = np.full(n_act, -1, dtype=np.int64)
            for j in range(d):
                nb = len(boundaries[j]) + 1
                if nb < 2 or not allowed[:, j].any():
                    continue
                if classification:
                    comp = (loc_h * nb + codes[rows_h, j]) * n_classes + y_h
                    hist = np.bincount(comp, minlength=n_act * nb * n_classes).reshape(n_act, nb, n_classes)
                    lc = np.cumsum(hist, axis=1)[:, :-1, :]
                    nl = np.einsum("abc->ab", lc)
                    nr = counts_a[:, None] - nl
                    rc = totals[act_nodes][:, None, :] - lc
                    with np.errstate(divide="ignore", invalid="ignore"):
                        score = (
                            np.einsum("abc,abc->ab", lc, lc) / nl
                            + np.einsum("abc,abc->ab", rc, rc) / nr
                        )
                else:
                    comp = loc_h * nb + codes[rows_h, j]
                    hsum = np.bincount(comp, weights=y_h, minlength=n_act * nb).reshape(n_act, nb)
                    hcnt = np.bincount(comp, minlength=n_act * nb).reshape(n_act, nb)
                    ls = np.cumsum(hsum, axis=1)[:, :-1]
                    nl = np.cumsum(hcnt, axis=1)[:, :-1]
                    nr = counts_a[:, None] - nl
                    rs = sums[act_nodes][:, None] - ls
                    with np.errstate(divide="ignore", invalid="ignore"):
                        score = ls**2 / nl + rs**2 / nr
                score[(nl < min_samples_leaf) | (nr < min_samples_leaf)] = -np.inf
                score[~allowed[:, j]] = -np.inf
                val = score.max(axis=1)
                # among near-tied cuts take the most balanced one, so that
                # plateaus in the criterion do not degenerate into chains
                tol = 1e-9 * np.maximum(counts_a, 1)
                tied = score >= (val - tol)[:, None]
                imbalance = np.where(tied, np.abs(nl - nr), np.inf)
                cut = np.argmin(imbalance, axis=1)
                better = val > score_a
                score_a[better] = val[better]
                feat_a[better] = j
                cut_a[better] = cut[better]
            best_score[act_nodes] = score_a
            best_feat[act_nodes] = feat_a
            best_cut[act_nodes] = cut_a

        do_split = splittable & (best_score > nosplit + _SPLIT_EPS)
        n_split = int(do_split.sum())

        # assemble this level's node block
        base = level_start + n_level
        split_rank = np.cumsum(do_split) - 1
        lid = np.where(do_split, base + 2 * split_rank, 0)
        feat_level = np.where(do_split, best_feat, -1)
        thr_level = np.zeros(n_level)
        for i in np.flatnonzero(do_split):
            thr_level[i] = boundaries[best_feat[i]][best_cut[i]]
        val_level = np.where(do_split[:, None], 0.0, leaf_payload)
        feat_chunks.append(feat_level)
        thr_chunks.append(thr_level)
        left_chunks.append(lid)
        right_chunks.append(np.where(do_split, lid + 1, 0))
        val_chunks.append(val_level)

        # route rows of split nodes to their children, drop leaf rows
        if n_split:
            sm = do_split[loc]
            rows = rows[sm]
            loc_s = loc[sm]
            go_left = codes[rows, best_feat[loc_s]] <= best_cut[loc_s]
            node_of = lid[loc_s] + (~go_left)
        else:
            rows = rows[:0]
            node_of = node_of[:0]
        level_start = base
        n_level = 2 * n_split
        depth += 1

    value = np.concatenate(val_chunks)
    if not classification:
        value = value[:, 0]
    return RegressionTree(
        np.concatenate(feat_chunks).astype(np.int64),
        np.concatenate(thr_chunks),
        np.concatenate(left_chunks).astype(np.int64),
        np.concatenate(right_chunks).astype(np.int64),
        value,
    )


# ---------------------------------------------------------------------------
# Random forest over loss-quantile bins
# ---------------------------------------------------------------------------


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = None
    min_samples_leaf: int = 2
    n_quantile_bins: int = 10
    features_per_split: int = None  # default ceil(sqrt(d))
    bootstrap: bool = True
    n_hist_bins: int = 256


@dataclass
class ForestClassifier:
    trees: list
    bin_edges: np.ndarray
    n_bins: int
    n_features: int

    def predict_score(self, x):
        """Expected bin index, averaged over trees; lower is better."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        probs = np.zeros((x.shape[0], self.n_bins))
        for tree in self.trees:
            probs += tree.predict(x)
        probs /= len(self.trees)
        return probs @ np.arange(self.n_bins, dtype=float)


def quantile_bins(losses, n_bins):
    """Assign losses to (at most) n_bins equal-population bins, bin 0 lowest.

    Identical loss values always share a bin; fewer distinct values than
    requested bins simply reduce the bin count.  Returns (bin ids, edges)
    with len(edges) == n_final_bins + 1 strictly increasing.
    """
    losses = np.asarray(losses, dtype=float)
    n = losses.size
    distinct = np.unique(losses)
    k_eff = min(n_bins, len(distinct))
    order = np.argsort(losses, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    raw = ranks * k_eff // n
    vid = np.searchsorted(distinct, losses)
    group_min = np.full(len(distinct), k_eff, dtype=np.int64)
    np.minimum.at(group_min, vid, raw)
    bins = group_min[vid]
    occupied = np.unique(bins)
    bins = np.searchsorted(occupied, bins)
    k_final = len(occupied)
    edges = np.empty(k_final + 1)
    edges[0] = distinct[0]
    edges[-1] = distinct[-1] if len(distinct) > 1 else distinct[0] + 1.0
    for b in range(1, k_final):
        lo = losses[bins == b - 1].max()
        hi = losses[bins == b].min()
        edges[b] = 0.5 * (lo + hi)
    return bins, edges


def fit_forest(x, losses, config=None, rng=None):
    """Random forest classifier over loss-quantile bins.

    Each tree sees a bootstrap resample and draws ceil(sqrt(d)) candidate
    split dimensions per node; splits minimize Gini impurity.  Fully
    deterministic given the RNG stream.
    """
    config = config or ForestConfig()
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=float)
    losses = np.asarray(losses, dtype=float)
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"forest needs at least 2 points, got {n}")
    bins, edges = quantile_bins(losses, config.n_quantile_bins)
    n_classes = len(edges) - 1
    fps = config.features_per_split or math.ceil(math.sqrt(d))
    codes, boundaries = _bin_features(x, config.n_hist_bins)
    trees = []
    for _ in range(config.n_trees):
        rows = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        trees.append(
            _grow_tree(codes, boundaries, bins, n_classes, config.max_depth, config.min_samples_leaf, fps, rng, rows)
        )
    return ForestClassifier(trees, edges, n_classes, d)


def predict_score_forest(model, x):
    return model.predict_score(x)


# ---------------------------------------------------------------------------
# Gradient-boosted regression trees
# ---------------------------------------------------------------------------


@dataclass
class BoostConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 1
    n_hist_bins: int = 256


@dataclass
class BoostedTreesRegressor:
    trees: list
    learning_rate: float
    base_prediction: float
    n_features: int

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        out = np.full(x.shape[0], self.base_prediction)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out


def fit_boosted(x, losses, config=None, rng=None):
    """Squared-error gradient boosting: each round fits a shallow tree to the
    current residuals and shrinks it by the learning rate.  Training MSE is
    non-increasing in the round count by construction."""
    config = config or BoostConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(losses, dtype=float)
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"boosting needs at least 2 points, got {n}")
    if not 0.0 < config.learning_rate <= 1.0:
        raise ValueError("learning_rate must be in (0, 1]")
    codes, boundaries = _bin_features(x, config.n_hist_bins)
    base = float(np.mean(y))
    residual = y - base
    rows = np.arange(n)
    dummy_rng = np.random.default_rng(0)  # unused: all features considered
    trees = []
    for _ in range(config.n_rounds):
        tree = _grow_tree(codes, boundaries, residual, None, config.max_depth, config.min_samples_leaf, None, dummy_rng, rows)
        residual = residual - config.learning_rate * tree.value[tree.apply(x)]
        trees.append(tree)
    return BoostedTreesRegressor(trees, config.learning_rate, base, d)


def predict_boosted(model, x):
    return model.predict(x)


# ---------------------------------------------------------------------------
# Gaussian process regression
# ---------------------------------------------------------------------------


@dataclass
class GPConfig:
    max_train: int = 500
    bounds: tuple = None  # (lowers, uppers) for unit-cube normalization
    length_scale: float = None
    signal_var: float = None
    noise_var: float = None
    optimize: bool = True

    # log-uniform search grids in normalized coordinates
    length_scale_grid: tuple = (0.03, 0.1, 0.3, 1.0, 3.0)
    signal_var_grid: tuple = (0.25, 1.0, 4.0)
    noise_var_grid: tuple = (1e-6, 1e-4, 1e-2, 1e-1)


@dataclass
class GaussianProcessModel:
    x_train: np.ndarray  # normalized to the unit cube
    lowers: np.ndarray
    uppers: np.ndarray
    y_mean: float
    y_std: float
    length_scales: np.ndarray
    signal_var: float
    noise_var: float
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    def _normalize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.lowers) / (self.uppers - self.lowers)

    def _cross_kernel(self, z):
        sq = np.zeros((z.shape[0], self.x_train.shape[0]))
        for j in range(z.shape[1]):
            sq += ((z[:, j, None] - self.x_train[None, :, j]) / self.length_scales[j]) ** 2
        return self.signal_var * np.exp(-0.5 * sq)

    def posterior(self, x):
        """Posterior mean and variance at query points, in loss units."""
        z = self._normalize(x)
        ks = self._cross_kernel(z)
        mean_std = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T)
        var_std = np.maximum(self.signal_var - np.einsum("ij,ij->j", v, v), 0.0)
        return self.y_mean + self.y_std * mean_std, var_std * self.y_std**2


def _kernel_matrix(z, length_scales, signal_var):
    sq = np.zeros((z.shape[0], z.shape[0]))
    for j in range(z.shape[1]):
        diff = z[:, j, None] - z[None, :, j]
        sq += (diff / length_scales[j]) ** 2
    return signal_var * np.exp(-0.5 * sq)


def _chol_with_jitter(k, noise_var):
    n = k.shape[0]
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(k + (noise_var + jitter) * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4:
                raise SingularKernelError(
                    f"kernel factorization failed after jitter escalation to 1e-4 (n={n})"
                ) from None


def _log_marginal_likelihood(z, y, ell, sf2, sn2):
    k = _kernel_matrix(z, np.full(z.shape[1], ell), sf2)
    try:
        chol = _chol_with_jitter(k, sn2)
    except SingularKernelError:
        return -np.inf
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    return float(-0.5 * y @ alpha - np.log(np.diag(chol)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def fit_gp(x, losses, config=None):
    """Gaussian process on inputs normalized to the unit cube and
    standardized targets.

    Hyperparameters maximize the log marginal likelihood over a coarse grid
    followed by a greedy local refinement (multiplicative steps, clipped to
    the grid ranges).  When the config pins all three hyperparameters the
    search is skipped entirely.
    """
    config = config or GPConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(losses, dtype=float)
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"GP needs at least 2 points, got {n}")
    if n > config.max_train:
        keep = np.argsort(y, kind="stable")[: config.max_train]
        keep.sort()
        x, y = x[keep], y[keep]
        n = config.max_train
    if config.bounds is not None:
        lowers = np.asarray(config.bounds[0], dtype=float)
        uppers = np.asarray(config.bounds[1], dtype=float)
    else:
        lowers = x.min(axis=0)
        uppers = x.max(axis=0)
    span = np.where(uppers > lowers, uppers - lowers, 1.0)
    uppers = lowers + span
    z = (x - lowers) / span

    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std

    fixed = config.length_scale is not None and config.signal_var is not None and config.noise_var is not None
    if fixed or not config.optimize:
        ell = config.length_scale if config.length_scale is not None else 1.0
        sf2 = config.signal_var if config.signal_var is not None else 1.0
        sn2 = config.noise_var if config.noise_var is not None else 1e-6
    else:
        best = (-np.inf, None)
        for ell_c in config.length_scale_grid:
            for sf2_c in config.signal_var_grid:
                for sn2_c in config.noise_var_grid:
                    lml = _log_marginal_likelihood(z, ys, ell_c, sf2_c, sn2_c)
                    if lml > best[0]:
                        best = (lml, (ell_c, sf2_c, sn2_c))
        ell, sf2, sn2 = best[1]
        current = best[0]
        ranges = {
            "ell": (min(config.length_scale_grid) / 3, max(config.length_scale_grid) * 3),
            "sf2": (min(config.signal_var_grid) / 3, max(config.signal_var_grid) * 3),
            "sn2": (min(config.noise_var_grid), max(config.noise_var_grid)),
        }
        for _ in range(2):
            improved = False
            for name in ("ell", "sf2", "sn2"):
                for factor in (0.5, 2.0):
                    cand = dict(ell=ell, sf2=sf2, sn2=sn2)
                    cand[name] = min(max(cand[name] * factor, ranges[name][0]), ranges[name][1])
                    lml = _log_marginal_likelihood(z, ys, **cand)
                    if lml > current + 1e-9:
                        ell, sf2, sn2 = cand["ell"], cand["sf2"], cand["sn2"]
                        current = lml
                        improved = True
            if not improved:
                break

    length_scales = np.full(d, float(ell))
    k = _kernel_matrix(z, length_scales, sf2)
    chol = _chol_with_jitter(k, sn2)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, ys))
    return GaussianProcessModel(z, lowers, lowers + span, y_mean, y_std, length_scales, float(sf2), float(sn2), chol, alpha)


def gp_posterior(model, x):
    return model.posterior(x)


def expected_improvement(model, x, best):
    """Closed-form expected improvement below ``best`` for minimization.

    Degenerates gracefully to max(best - mean, 0) where the posterior
    standard deviation is zero.
    """
    mean, var = model.posterior(x)
    sd = np.sqrt(var)
    gap = best - mean
    out = np.maximum(gap, 0.0)
    pos = sd > 0.0
    if np.any(pos):
        zed = gap[pos] / sd[pos]
        out[pos] = gap[pos] * ndtr(zed) + sd[pos] * np.exp(-0.5 * zed**2) / math.sqrt(2 * math.pi)
    return out
