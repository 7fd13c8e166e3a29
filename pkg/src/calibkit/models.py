"""Desk-scale simulators implementing the black-box model contract.

A model maps (parameter vector, n_steps, burn_in, seed) to a D x n_steps
series panel, bit-identically for identical inputs.  Shipped models:

* ``bh4``: the standard discrete-choice asset pricing model with
  heterogeneous belief types switching on past forecast fitness.
* ``sir_network``: a discrete-time SIR epidemic on a small-world
  (rewired ring) contact network.
* ``sphere`` / ``multimodal``: instant analytic landscapes emitting the
  objective value as a constant series, for fast sampler tests.

External simulators written in any language can be attached through a
line-oriented subprocess handshake, see SubprocessModel.
"""

import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from calibkit.core import ParameterDim, ParameterSpace
from calibkit.losses import SeriesPanel

EXPLOSION_LIMIT = 1e9


class ModelExplosionError(RuntimeError):
    """Simulated state diverged beyond the numeric guard."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(message)


class Model:
    """Black-box simulator contract.

    Subclasses define name, param_names, output_dims, dim_names and
    implement simulate_ensemble; simulate is the single-seed convenience
    wrapper so both paths share one code path.
    """

    name = "?"
    param_names = ()
    dim_names = ()

    @property
    def output_dims(self):
        return len(self.dim_names)

    def default_space(self):
        raise NotImplementedError

    def simulate_ensemble(self, params, n_steps, burn_in, seeds):
        raise NotImplementedError

    def simulate(self, params, n_steps, burn_in, seed):
        return self.simulate_ensemble(params, n_steps, burn_in, [seed])[0]

    def _check_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (len(self.param_names),):
            raise ValueError(
                f"{self.name} expects {len(self.param_names)} parameters {self.param_names}, got shape {params.shape}"
            )
        return params


# ---------------------------------------------------------------------------
# Heterogeneous-beliefs asset pricing (4 belief types)
# ---------------------------------------------------------------------------


@dataclass
class BrockHommesConfig:
    """Fixed settings of the belief-switching asset pricing model.

    ``belief_types`` lists (trend coefficient g_h, bias b_h) per type;
    entries named in ``calibrated`` are overridden by the parameter vector
    at simulation time, in the order given there.  Valid parameter names
    are g1..gH, b1..bH, beta and sigma.
    """

    gross_return: float = 1.01
    belief_types: tuple = ((0.0, 0.0), (0.9, 0.2), (0.9, -0.2), (1.01, 0.0))
    intensity_of_choice: float = 3.0
    fitness_memory: float = 0.0
    noise_std: float = 0.04
    initial_deviation: float = 0.1
    calibrated: tuple = ("g2", "b2", "g3", "b3", "beta")

    def __post_init__(self):
        if not self.gross_return > 1.0:
            raise ValueError("gross_return must exceed 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.fitness_memory < 1.0:
            raise ValueError("fitness_memory must be in [0, 1)")
        valid = {f"g{i + 1}" for i in range(len(self.belief_types))}
        valid |= {f"b{i + 1}" for i in range(len(self.belief_types))}
        valid |= {"beta", "sigma"}
        unknown = set(self.calibrated) - valid
        if unknown:
            raise ValueError(f"unknown calibrated parameter names: {sorted(unknown)}")


_BH_RANGES = {"g": (-1.5, 1.5), "b": (-0.5, 0.5), "beta": (0.0, 10.0), "sigma": (0.0, 0.5)}


class BrockHommesModel(Model):
    """Price deviations from the fundamental under belief switching.

    With R the gross return, type h forecasts f_{h,t} = g_h x_{t-1} + b_h.
    Type fractions follow a discrete-choice rule on past fitness,

        U_{h,t-1} = (x_{t-1} - R x_{t-2}) (f_{h,t-2} - R x_{t-2})
                    + w U_{h,t-2}
        n_{h,t}   = exp(beta U_{h,t-1}) / sum_j exp(beta U_{j,t-1})

    and the price deviation updates as

        x_t = (1/R) sum_h n_{h,t} f_{h,t} + eps_t,   eps_t ~ N(0, sigma^2).

    Softmax terms are max-subtracted for overflow safety; fitness and lagged
    states are zero-initialized so the first fractions are uniform.  A
    deviation exceeding 1e9 in magnitude aborts with the offending step.
    """

    name = "bh4"
    dim_names = ("price_dev",)

    def __init__(self, config=None):
        self.config = config or BrockHommesConfig()
        self.param_names = tuple(self.config.calibrated)

    def default_space(self):
        dims = []
        for pname in self.param_names:
            lo, up = _BH_RANGES[pname.rstrip("0123456789")]
            dims.append(ParameterDim.with_default_step(pname, lo, up))
        return ParameterSpace(tuple(dims))

    def _resolve(self, params):
        params = self._check_params(params)
        cfg = self.config
        g = np.array([t[0] for t in cfg.belief_types])
        b = np.array([t[1] for t in cfg.belief_types])
        beta = cfg.intensity_of_choice
        sigma = cfg.noise_std
        for pname, value in zip(self.param_names, params):
            if pname == "beta":
                beta = value
            elif pname == "sigma":
                sigma = value
            elif pname.startswith("g"):
                g[int(pname[1:]) - 1] = value
            else:
                b[int(pname[1:]) - 1] = value
        return g, b, beta, sigma

    @staticmethod
    def type_fractions(beta, fitness):
        """Discrete-choice type shares: softmax of beta * fitness, computed
        with max subtraction so large intensities cannot overflow."""
        z = beta * fitness
        z = z - z.max(axis=1, keepdims=True)
        w = np.exp(z)
        return w / w.sum(axis=1, keepdims=True)

    def simulate_ensemble(self, params, n_steps, burn_in, seeds):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        g, b, beta, sigma = self._resolve(params)
        cfg = self.config
        n_types = len(g)
        n_members = len(seeds)
        total = burn_in + n_steps
        rr = cfg.gross_return
        if sigma > 0:
            noise = np.stack([np.random.default_rng(s).standard_normal(total) * sigma for s in seeds])
        else:
            noise = np.zeros((n_members, total))

        x1 = np.full(n_members, cfg.initial_deviation)  # x_{t-1}
        x2 = x1.copy()  # x_{t-2}
        x3 = x1.copy()  # x_{t-3}
        fitness = np.zeros((n_members, n_types))
        out = np.empty((n_members, total))
        for t in range(total):
            forecast_lag2 = g[None, :] * x3[:, None] + b[None, :]
            gain = (x1 - rr * x2)[:, None] * (forecast_lag2 - (rr * x2)[:, None])
            fitness = gain + cfg.fitness_memory * fitness
            fractions = self.type_fractions(beta, fitness)
            forecast = g[None, :] * x1[:, None] + b[None, :]
            x_new = (fractions * forecast).sum(axis=1) / rr + noise[:, t]
            if np.any(np.abs(x_new) > EXPLOSION_LIMIT):
                member = int(np.argmax(np.abs(x_new) > EXPLOSION_LIMIT))
                raise ModelExplosionError(
                    t, f"price deviation diverged at step {t} (seed {seeds[member]})"
                )
            x3, x2, x1 = x2, x1, x_new
            out[:, t] = x_new
        return [SeriesPanel(out[m, burn_in:][None, :], self.dim_names) for m in range(n_members)]


# ---------------------------------------------------------------------------
# SIR epidemic on a small-world network
# ---------------------------------------------------------------------------


@dataclass
class SIRNetworkConfig:
    """Fixed settings of the network epidemic.

    The contact graph is a ring over n_nodes where each node links to its
    ring_k nearest neighbours, with every ring edge rewired with the given
    probability to a uniform non-duplicate, non-self target.  Parameter
    names available for calibration: infection_prob, recovery_prob,
    rewire_p.
    """

    n_nodes: int = 1000
    ring_k: int = 10
    rewire_p: float = 0.1
    infection_prob: float = 0.1
    recovery_prob: float = 0.05
    initial_infected_fraction: float = 0.01
    calibrated: tuple = ("infection_prob", "recovery_prob", "rewire_p")

    def __post_init__(self):
        if self.ring_k % 2 != 0:
            raise ValueError("ring_k must be even")
        if not 0 < self.ring_k < self.n_nodes:
            raise ValueError("ring_k must be in (0, n_nodes)")
        for pname in ("rewire_p", "infection_prob", "recovery_prob", "initial_infected_fraction"):
            v = getattr(self, pname)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{pname} must be in [0, 1]")
        unknown = set(self.calibrated) - {"infection_prob", "recovery_prob", "rewire_p"}
        if unknown:
            raise ValueError(f"unknown calibrated parameter names: {sorted(unknown)}")


_SIR_RANGES = {"infection_prob": (0.0, 1.0), "recovery_prob": (0.0, 0.5), "rewire_p": (0.0, 1.0)}


def watts_strogatz_edges(n_nodes, ring_k, rewire_p, rng):
    """Edge arrays (targets, sources) of a rewired ring lattice.

    Starts from the ring where node i links to i+1 .. i+ring_k/2 (mod n);
    each edge independently has its far endpoint replaced, with probability
    rewire_p, by a uniform random node that is neither the near endpoint
    nor an existing neighbour.  Edge count is preserved exactly.
    """
    half = ring_k // 2
    base = np.arange(n_nodes)
    src = np.tile(base, half)
    tgt = np.concatenate([(base + j) % n_nodes for j in range(1, half + 1)])
    if rewire_p > 0.0:
        picked = np.flatnonzero(rng.random(len(src)) < rewire_p)
        if len(picked):
            present = {(min(a, b), max(a, b)) for a, b in zip(tgt.tolist(), src.tolist())}
            degree = np.full(n_nodes, ring_k)
            for e in picked:
                s, t = int(src[e]), int(tgt[e])
                if degree[s] >= n_nodes - 1:
                    continue
                new = t
                while new == s or (min(s, new), max(s, new)) in present:
                    new = int(rng.integers(0, n_nodes))
                present.remove((min(s, t), max(s, t)))
                present.add((min(s, new), max(s, new)))
                degree[t] -= 1
                degree[new] += 1
                tgt[e] = new
    return tgt, src


def _adjacency(n_nodes, edges):
    tgt, src = edges
    data = np.ones(2 * len(tgt))
    rows = np.concatenate([tgt, src])
    cols = np.concatenate([src, tgt])
    return sparse.csr_array((data, (rows, cols)), shape=(n_nodes, n_nodes))


class SIRNetworkModel(Model):
    """Discrete-time SIR dynamics with synchronous updates.

    Per step, a susceptible node with m infected neighbours becomes
    infected with probability 1 - (1 - infection_prob)^m, and an infected
    node recovers with probability recovery_prob; both transitions are
    evaluated on the pre-step state.  Output rows are the susceptible,
    infected and recovered population fractions, with the recovered
    fraction emitted as 1 - s - i so the three rows sum to one exactly.
    """

    name = "sir_network"
    dim_names = ("susceptible", "infected", "recovered")

    def __init__(self, config=None):
        self.config = config or SIRNetworkConfig()
        self.param_names = tuple(self.config.calibrated)

    def default_space(self):
        dims = []
        for pname in self.param_names:
            lo, up = _SIR_RANGES[pname]
            dims.append(ParameterDim.with_default_step(pname, lo, up))
        return ParameterSpace(tuple(dims))

    def _resolve(self, params):
        params = self._check_params(params)
        values = {
            "infection_prob": self.config.infection_prob,
            "recovery_prob": self.config.recovery_prob,
            "rewire_p": self.config.rewire_p,
        }
        values.update(zip(self.param_names, params))
        for pname, v in values.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{pname} must be in [0, 1], got {v}")
        return values["infection_prob"], values["recovery_prob"], values["rewire_p"]

    def simulate_ensemble(self, params, n_steps, burn_in, seeds):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        p_inf, p_rec, rewire_p = self._resolve(params)
        cfg = self.config
        n = cfg.n_nodes
        n_seed = max(1, round(cfg.initial_infected_fraction * n))
        total = burn_in + n_steps
        panels = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            adjacency = _adjacency(n, watts_strogatz_edges(n, cfg.ring_k, rewire_p, rng))
            infected = np.zeros(n, dtype=bool)
            infected[rng.choice(n, n_seed, replace=False)] = True
            recovered = np.zeros(n, dtype=bool)
            out = np.empty((3, total))
            for t in range(total):
                m = adjacency @ infected.astype(float)
                susceptible = ~infected & ~recovered
                catch = susceptible & (rng.random(n) < 1.0 - (1.0 - p_inf) ** m)
                heal = infected & (rng.random(n) < p_rec)
                infected = (infected | catch) & ~heal
                recovered = recovered | heal
                s = float((~infected & ~recovered).sum()) / n
                i = float(infected.sum()) / n
                # r as the exact complement of (s + i) keeps s + i + r == 1.0
                # in float arithmetic at every step
                out[:, t] = (s, i, 1.0 - (s + i))
            panels.append(SeriesPanel(out[:, burn_in:], self.dim_names))
        return panels


# ---------------------------------------------------------------------------
# Analytic landscapes
# ---------------------------------------------------------------------------

_RIPPLE_AMPLITUDE = 0.05
_RIPPLE_CYCLES = 6.0


def sphere_value(x):
    x = np.asarray(x, dtype=float)
    return float(np.sum((x - 0.3) ** 2))


def multimodal_value(x):
    """Sphere plus a cosine ripple, giving several local minima per
    dimension; the global minimum stays at 0.3 with value 0."""
    x = np.asarray(x, dtype=float)
    u = x - 0.3
    return float(np.sum(u**2 + _RIPPLE_AMPLITUDE * (1.0 - np.cos(2.0 * np.pi * _RIPPLE_CYCLES * u))))


_LANDSCAPES = {"sphere": sphere_value, "multimodal": multimodal_value}


class SyntheticLandscapeModel(Model):
    """Deterministic objective emitted as a constant series.

    Against an all-zero target panel the Euclidean loss then equals the
    objective value exactly, which makes sampler behaviour easy to assert.
    """

    dim_names = ("objective",)

    def __init__(self, landscape="sphere", dimension=2):
        if landscape not in _LANDSCAPES:
            raise ValueError(f"unknown landscape {landscape!r}; known: {sorted(_LANDSCAPES)}")
        self.name = landscape
        self._fn = _LANDSCAPES[landscape]
        self.param_names = tuple(f"x{i + 1}" for i in range(dimension))

    def default_space(self):
        return ParameterSpace(
            tuple(ParameterDim.with_default_step(p, 0.0, 1.0) for p in self.param_names)
        )

    def simulate_ensemble(self, params, n_steps, burn_in, seeds):
        params = self._check_params(params)
        value = self._fn(params)
        row = np.full((1, n_steps), value)
        return [SeriesPanel(row, self.dim_names) for _ in seeds]


# ---------------------------------------------------------------------------
# External models over a subprocess pipe
# ---------------------------------------------------------------------------


class SubprocessModel(Model):
    """Attach a simulator running as a child process.

    Handshake: for each simulation the engine writes one text line to the
    child's stdin,

        <n_steps> <burn_in> <seed> <c1,c2,...,cd>

    and reads the child's stdout as a CSV series panel (header row of
    dimension names, one row per time step).  One process is spawned per
    simulate call and must exit 0 within the timeout.
    """

    def __init__(self, command, param_names, dim_names, name="subprocess", timeout=60.0):
        self.command = list(command)
        self.param_names = tuple(param_names)
        self.dim_names = tuple(dim_names)
        self.name = name
        self.timeout = timeout

    def default_space(self):
        return ParameterSpace(
            tuple(ParameterDim.with_default_step(p, 0.0, 1.0) for p in self.param_names)
        )

    def simulate_ensemble(self, params, n_steps, burn_in, seeds):
        params = self._check_params(params)
        return [self._run_one(params, n_steps, burn_in, s) for s in seeds]

    def _run_one(self, params, n_steps, burn_in, seed):
        import io

        from calibkit.losses import PanelFormatError

        line = f"{n_steps} {burn_in} {seed} {','.join(repr(float(v)) for v in params)}\n"
        proc = subprocess.run(
            self.command,
            input=line,
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"external model {self.name!r} exited with {proc.returncode}: {proc.stderr.strip()}"
            )
        import csv as _csv

        reader = _csv.reader(io.StringIO(proc.stdout))
        rows = list(reader)
        if len(rows) < 2:
            raise PanelFormatError(f"external model {self.name!r} produced no data rows")
        try:
            values = np.array([[float(c) for c in row] for row in rows[1:]], dtype=float).T
        except ValueError as exc:
            raise PanelFormatError(f"external model {self.name!r}: {exc}") from None
        if values.shape[0] != self.output_dims or values.shape[1] != n_steps:
            raise PanelFormatError(
                f"external model {self.name!r} returned shape {values.shape}, expected "
                f"({self.output_dims}, {n_steps})"
            )
        return SeriesPanel(values, self.dim_names)


# ---------------------------------------------------------------------------
# Pseudo-true recovery tasks and the model registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoTrueTask:
    """Synthetic 'real' data generated at known parameters, so the quality
    of a calibration is measurable against the generating truth."""

    real_panel: SeriesPanel
    space: ParameterSpace
    model: Model
    true_params: tuple
    n_steps: int
    burn_in: int


def make_pseudo_true_task(model, true_params, n_steps, burn_in=0, seed=987_654_321, space=None):
    """Simulate the model at true_params with a held-out seed and return the
    target panel together with the search space."""
    space = space or model.default_space()
    true_params = tuple(float(v) for v in true_params)
    if not space.contains(true_params):
        raise ValueError("true_params must lie on the search grid")
    panel = model.simulate(np.asarray(true_params), n_steps, burn_in, seed)
    return PseudoTrueTask(panel, space, model, true_params, n_steps, burn_in)


def build_model(name, settings=None):
    """Model registry keyed by name, with per-model settings dict."""
    settings = dict(settings or {})
    if name == "bh4":
        if "belief_types" in settings:
            settings["belief_types"] = tuple(tuple(t) for t in settings["belief_types"])
        if "calibrated" in settings:
            settings["calibrated"] = tuple(settings["calibrated"])
        return BrockHommesModel(BrockHommesConfig(**settings))
    if name == "sir_network":
        if "calibrated" in settings:
            settings["calibrated"] = tuple(settings["calibrated"])
        return SIRNetworkModel(SIRNetworkConfig(**settings))
    if name in _LANDSCAPES:
        model = SyntheticLandscapeModel(name, dimension=settings.pop("dimension", 2))
    elif name == "subprocess":
        model = SubprocessModel(
            settings.pop("command"),
            settings.pop("param_names"),
            settings.pop("dim_names"),
            name=settings.pop("label", "subprocess"),
            timeout=settings.pop("timeout", 60.0),
        )
    else:
        raise ValueError(f"unknown model {name!r}; known: bh4, sir_network, sphere, multimodal, subprocess")
    if settings:
        raise ValueError(f"unknown settings for model {name!r}: {sorted(settings)}")
    return model
