"""Goodness-of-fit measures between real and simulated series panels.

The headline loss is a method-of-moments distance: for each series
dimension an 18-entry moment summary is computed, and the squared gap
between real and simulated moments is weighted by the inverse squared real
moments, making every term a relative squared error.  A plain Euclidean
distance is provided for models whose raw trajectories are directly
comparable, plus the detrending / de-meaning transforms needed to put real
macro series and simulated output on the same footing.
"""

import csv
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

N_MOMENTS = 18
MAX_AC_LAG = 5
MIN_SERIES_LENGTH = 2 * MAX_AC_LAG + 2

MOMENT_NAMES = (
    "mean",
    "variance",
    "skewness",
    "ex_kurtosis",
    "ac_lag1",
    "ac_lag2",
    "ac_lag3",
    "ac_lag4",
    "ac_lag5",
    "diff_mean",
    "diff_variance",
    "diff_skewness",
    "diff_ex_kurtosis",
    "diff_ac_lag1",
    "diff_ac_lag2",
    "diff_ac_lag3",
    "diff_ac_lag4",
    "diff_ac_lag5",
)

DEFAULT_WEIGHT_FLOOR = 1e-12


class PanelFormatError(ValueError):
    """Raised when a CSV panel file cannot be parsed."""


@dataclass(frozen=True)
class SeriesPanel:
    """A D x T block of real-valued time series.

    Rows are series dimensions, columns are time steps.  Values must be
    finite; models that can diverge are expected to fail explicitly rather
    than emit NaN or infinity.
    """

    values: np.ndarray
    dim_names: tuple = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"panel must be 2-dimensional, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("panel contains non-finite values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.dim_names is not None:
            names = tuple(self.dim_names)
            if len(names) != values.shape[0]:
                raise ValueError("dim_names length must match the number of series")
            object.__setattr__(self, "dim_names", names)

    @property
    def n_dims(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    def name_of(self, d):
        return self.dim_names[d] if self.dim_names else f"dim{d}"


def read_panel_csv(path):
    """Load a SeriesPanel from CSV: header of dimension names, one row per step.

    Missing or non-numeric cells are rejected with the offending row/column.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        if any(not n for n in names):
            raise PanelFormatError(f"{path}: blank column name in header")
        rows = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(names):
                raise PanelFormatError(f"{path}:{i}: expected {len(names)} columns, got {len(row)}")
            parsed = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    raise PanelFormatError(f"{path}:{i}: missing value in column {names[j]!r}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise PanelFormatError(f"{path}:{i}: non-numeric value {cell!r} in column {names[j]!r}") from None
            rows.append(parsed)
    if not rows:
        raise PanelFormatError(f"{path}: no data rows")
    return SeriesPanel(np.array(rows, dtype=float).T, tuple(names))


def write_panel_csv(panel, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([panel.name_of(d) for d in range(panel.n_dims)])
        for t in range(panel.n_steps):
            writer.writerow([repr(float(v)) for v in panel.values[:, t]])


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def _basic_moments(x):
    """mean, population variance, skewness, excess kurtosis, autocorr 1..5."""
    n = x.size
    mean = float(np.mean(x))
    centered = x - mean
    var = float(np.mean(centered**2))
    out = np.zeros(4 + MAX_AC_LAG)
    out[0] = mean
    out[1] = var
    if var > 0.0:
        sd = math.sqrt(var)
        out[2] = float(np.mean(centered**3)) / sd**3
        out[3] = float(np.mean(centered**4)) / var**2 - 3.0
        for lag in range(1, MAX_AC_LAG + 1):
            cov = float(np.dot(centered[lag:], centered[:-lag])) / n
            out[3 + lag] = cov / var
    # zero-variance series: skewness, kurtosis and autocorrelations are 0 by
    # convention so degenerate simulation runs cannot inject NaN into a loss
    return out


def compute_moments(series):
    """18-entry moment summary of a one-dimensional series.

    Entries 1-4: mean, variance, skewness, excess kurtosis; 5-9:
    autocorrelations at lags 1..5; 10-18: the same statistics for the
    first-differenced series.  Variance is population-normalized (divide by
    n) and the autocorrelation at lag k is the lag-k autocovariance over the
    variance.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < MIN_SERIES_LENGTH:
        raise ValueError(f"series too short for moments: {x.size} < {MIN_SERIES_LENGTH}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    return np.concatenate([_basic_moments(x), _basic_moments(np.diff(x))])


def panel_moments(panel):
    """D x 18 matrix of per-dimension moment summaries."""
    return np.array([compute_moments(panel.values[d]) for d in range(panel.n_dims)])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightSpec:
    """Diagonal weights for the moments loss, one row of 18 per dimension.

    The default weighting is 1 / (18 * max(m_i^2, floor^2)) built from the
    real moments, so each weighted term is the relative squared moment error
    averaged over the 18 statistics.  The floor guards division by
    near-zero real moments (de-meaned series have means of essentially 0).
    """

    weights: np.ndarray
    floor: float = DEFAULT_WEIGHT_FLOOR

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != N_MOMENTS:
            raise ValueError(f"weights must be D x {N_MOMENTS}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
        w = w.copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_real_moments(cls, real_moments, floor=DEFAULT_WEIGHT_FLOOR):
        if floor <= 0:
            raise ValueError("floor must be positive")
        m = np.asarray(real_moments, dtype=float)
        w = 1.0 / (N_MOMENTS * np.maximum(m**2, floor**2))
        return cls(w, floor)


def moments_loss(real, simulated_ensemble, weights=None, real_moments=None, floor=DEFAULT_WEIGHT_FLOOR):
    """Weighted squared distance between real and simulated moments.

    For each ensemble member the per-dimension moment gap g_d is formed and
    scored as g_d' W_d g_d, the scores are averaged over dimensions, and the
    loss is the mean of the per-member values.  Zero exactly when every
    simulated moment matches the real one.
    """
    if not simulated_ensemble:
        raise ValueError("empty simulated ensemble")
    if real_moments is None:
        real_moments = panel_moments(real)
    d_real = real_moments.shape[0]
    if weights is None:
        weights = WeightSpec.from_real_moments(real_moments, floor)
    if weights.weights.shape[0] != d_real:
        raise ValueError("weights dimension count does not match the real panel")
    member_losses = []
    for sim in simulated_ensemble:
        if sim.n_dims != d_real:
            raise ValueError(f"dimension mismatch: real has {d_real} series, simulated has {sim.n_dims}")
        g = real_moments - panel_moments(sim)
        member_losses.append(float(np.mean(np.sum(weights.weights * g**2, axis=1))))
    return float(np.mean(member_losses))


def euclidean_loss(real, simulated_ensemble):
    """Mean over the ensemble of the RMS pointwise gap between panels."""
    if not simulated_ensemble:
        raise ValueError("empty simulated ensemble")
    member_losses = []
    for sim in simulated_ensemble:
        if sim.values.shape != real.values.shape:
            raise ValueError(f"shape mismatch: real {real.values.shape}, simulated {sim.values.shape}")
        member_losses.append(float(np.sqrt(np.mean((real.values - sim.values) ** 2))))
    return float(np.mean(member_losses))


# ---------------------------------------------------------------------------
# Trend filtering and preprocessing
# ---------------------------------------------------------------------------


def hp_filter(series, smoothing=1600.0):
    """Penalized least-squares trend/cycle split of a series.

    The trend minimizes sum((x - tau)^2) + smoothing * sum((d2 tau)^2) and
    is obtained from the exact pentadiagonal normal equations
    (I + smoothing * K'K) tau = x with K the second-difference operator.
    Returns (trend, cycle) with trend + cycle == series to machine
    precision.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 4:
        raise ValueError(f"series too short for trend filtering: {x.size} < 4")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    n = x.size
    lam = float(smoothing)
    d0 = np.full(n, 1.0 + 6.0 * lam)
    d0[[0, -1]] = 1.0 + lam
    d0[[1, -2]] = 1.0 + 5.0 * lam
    d1 = np.full(n - 1, -4.0 * lam)
    d1[[0, -1]] = -2.0 * lam
    d2 = np.full(n - 2, lam)
    ab = np.zeros((3, n))
    ab[0, 2:] = d2
    ab[1, 1:] = d1
    ab[2, :] = d0
    # solving for the cycle instead of the trend keeps smooth inputs exact:
    # the right-hand side lam * K'(K x) vanishes when second differences do,
    # regardless of how large the smoothing is
    rhs = lam * np.convolve(np.diff(x, 2), [1.0, -2.0, 1.0])
    cycle = solveh_banded(ab, rhs, lower=False)
    return x - cycle, cycle


def hp_smoothing_for_frequency(periods_per_year, base_periods=4, base_smoothing=1600.0):
    """Quarterly-convention smoothing rescaled by the fourth power of the
    frequency ratio (e.g. 6.25 for annual data, 129600 for monthly)."""
    return base_smoothing * (periods_per_year / base_periods) ** 4


_TRANSFORM_RE = re.compile(r"^([a-z_]+)(?:\(([^)]*)\))?$")


def _apply_transform(name, arg, x, dim_name):
    if name == "identity":
        return x
    if name == "log":
        if np.any(x <= 0):
            bad = int(np.argmax(x <= 0))
            raise ValueError(f"log of non-positive value at dimension {dim_name!r}, index {bad}")
        return np.log(x)
    if name == "log_difference":
        if np.any(x <= 0):
            bad = int(np.argmax(x <= 0))
            raise ValueError(f"log of non-positive value at dimension {dim_name!r}, index {bad}")
        return np.diff(np.log(x))
    if name == "de_mean":
        return x - np.mean(x)
    if name == "hp_cycle":
        smoothing = 1600.0 if arg is None else float(arg)
        return hp_filter(x, smoothing)[1]
    raise ValueError(f"unknown transform {name!r} for dimension {dim_name!r}")


def parse_transform(spec):
    """Parse a transform spec like 'log', 'hp_cycle(1600)' into (name, arg)."""
    m = _TRANSFORM_RE.match(spec.strip())
    if not m:
        raise ValueError(f"malformed transform spec {spec!r}")
    name, arg = m.group(1), m.group(2)
    if name not in ("identity", "log", "log_difference", "de_mean", "hp_cycle"):
        raise ValueError(f"unknown transform {name!r}")
    if arg is not None and name != "hp_cycle":
        raise ValueError(f"transform {name!r} takes no argument")
    return name, arg


def preprocess_panel(panel, transforms):
    """Apply per-dimension transform chains and align lengths.

    ``transforms`` maps dimension name to an ordered list of specs from
    {identity, log, log_difference, de_mean, hp_cycle(lambda)}.  Dimensions
    without an entry pass through unchanged.  Differencing shortens a series
    by one step, so all dimensions are truncated to the common minimum
    length keeping the most recent steps.
    """
    known = set(transforms) - {panel.name_of(d) for d in range(panel.n_dims)}
    if known:
        raise ValueError(f"preprocessing names unknown dimensions: {sorted(known)}")
    columns = []
    for d in range(panel.n_dims):
        x = panel.values[d]
        for spec in transforms.get(panel.name_of(d), ()):
            name, arg = parse_transform(spec)
            x = _apply_transform(name, arg, x, panel.name_of(d))
        columns.append(x)
    t_min = min(len(c) for c in columns)
    values = np.array([c[len(c) - t_min :] for c in columns])
    return SeriesPanel(values, panel.dim_names)
