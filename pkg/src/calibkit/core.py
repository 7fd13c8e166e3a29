"""Parameter-space geometry, evaluation records and run persistence.

The search domain is a bounded box discretized on a regular grid, one step
size per dimension.  Every candidate the engine ever evaluates is a grid
point, which makes deduplication exact (integer grid indices) and keeps
checkpoint files round-trip safe.
"""

import base64
import math
import re
from dataclasses import dataclass, field

import numpy as np

_NAME_RE = re.compile(r"^[A-Za-z0-9_.+-]+$")

_MASK64 = (1 << 64) - 1

# Reserved lanes for the internal per-batch RNG streams.  Lane 0 is the
# simulation-seed lane used by derive_seed.
LANE_SIMULATION = 0
LANE_SAMPLER = 1
LANE_SCHEDULER = 2
LANE_FALLBACK = 3


class InsufficientDataError(ValueError):
    """Raised when an operation needs more evaluations than are available."""


class GridExhaustedError(RuntimeError):
    """Raised when a batch cannot be filled with unseen grid points."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is missing, truncated or corrupt."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CheckpointVersionError(ValueError):
    """Checkpoint file was written by an incompatible format version."""


# ---------------------------------------------------------------------------
# Parameter space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterDim:
    """One bounded, grid-discretized search dimension.

    Grid points are ``lower + k * step`` for integer ``k`` in
    ``[0, n_points - 1]``.  ``upper`` itself is a grid point only when
    ``step`` divides the range.
    """

    name: str
    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"invalid dimension name {self.name!r}")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and math.isfinite(self.step)):
            raise ValueError(f"dimension {self.name}: bounds and step must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"dimension {self.name}: lower must be < upper")
        if not (self.step > 0 and self.step <= self.upper - self.lower):
            raise ValueError(f"dimension {self.name}: step must be in (0, upper - lower]")

    @classmethod
    def with_default_step(cls, name, lower, upper):
        """Dimension with the default resolution of 100 steps across the range."""
        return cls(name, lower, upper, (upper - lower) / 100.0)

    @property
    def max_index(self):
        """Largest k with lower + k * step <= upper."""
        k = math.floor((self.upper - self.lower) / self.step + 1e-9)
        while self.lower + k * self.step > self.upper:
            k -= 1
        return k

    @property
    def n_points(self):
        return self.max_index + 1

    def coord(self, k):
        """Grid coordinate for index k."""
        return self.lower + k * self.step

    def index_of(self, x):
        """Nearest grid index for an in-bounds value; ties round toward lower."""
        q = (x - self.lower) / self.step
        k = math.ceil(q - 0.5)
        return min(max(k, 0), self.max_index)


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered collection of dimensions spanning the search box."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 1:
            raise ValueError("parameter space needs at least one dimension")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")

    @classmethod
    def from_bounds(cls, names, lowers, uppers, steps=None):
        if steps is None:
            dims = [ParameterDim.with_default_step(n, lo, up) for n, lo, up in zip(names, lowers, uppers)]
        else:
            dims = [ParameterDim(n, lo, up, s) for n, lo, up, s in zip(names, lowers, uppers, steps)]
        return cls(tuple(dims))

    @property
    def dimension(self):
        return len(self.dims)

    @property
    def names(self):
        return tuple(d.name for d in self.dims)

    @property
    def lowers(self):
        return np.array([d.lower for d in self.dims])

    @property
    def uppers(self):
        return np.array([d.upper for d in self.dims])

    @property
    def n_grid_points(self):
        total = 1
        for d in self.dims:
            total *= d.n_points
        return total

    def to_indices(self, coords):
        """Exact grid indices of an already grid-aligned coordinate vector."""
        coords = tuple(coords)
        if len(coords) != self.dimension:
            raise ValueError(f"expected {self.dimension} coordinates, got {len(coords)}")
        out = []
        for d, x in zip(self.dims, coords):
            k = round((x - d.lower) / d.step)
            if not (0 <= k <= d.max_index) or d.coord(k) != x:
                raise ValueError(f"coordinate {x!r} of dimension {d.name} is not on the grid")
            out.append(k)
        return tuple(out)

    def to_coords(self, indices):
        """Coordinate vector for a tuple of grid indices."""
        if len(indices) != self.dimension:
            raise ValueError(f"expected {self.dimension} indices, got {len(indices)}")
        return tuple(d.coord(k) for d, k in zip(self.dims, indices))

    def contains(self, coords):
        try:
            self.to_indices(coords)
        except ValueError:
            return False
        return True

    def snap_indices(self, raw):
        """Vectorized snap of an (m, d) block of raw vectors to grid indices."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        if raw.shape[1] != self.dimension:
            raise ValueError(f"expected {self.dimension} coordinates, got {raw.shape[1]}")
        lowers = self.lowers
        steps = np.array([d.step for d in self.dims])
        x = np.clip(raw, lowers, self.uppers)
        k = np.ceil((x - lowers) / steps - 0.5).astype(np.int64)
        return np.clip(k, 0, np.array([d.max_index for d in self.dims]))

    def coords_of_indices(self, indices):
        """Vectorized coordinates for an (m, d) block of grid indices."""
        indices = np.atleast_2d(np.asarray(indices, dtype=np.int64))
        lowers = self.lowers
        steps = np.array([d.step for d in self.dims])
        return lowers + indices * steps


def snap_to_grid(space, raw):
    """Clip a raw vector to the box and round each coordinate to the grid.

    Ties between two grid points round toward the lower one.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (space.dimension,):
        raise ValueError(f"expected {space.dimension} coordinates, got shape {raw.shape}")
    out = []
    for d, x in zip(space.dims, raw):
        x = min(max(float(x), d.lower), d.upper)
        out.append(d.coord(d.index_of(x)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Evaluation history
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationRecord:
    """One evaluated parameter vector with its per-seed ensemble losses.

    ``loss`` is always the mean of ``ensemble_losses``.  A non-finite loss
    marks a failed simulation (kept in the history, excluded from surrogate
    training).
    """

    params: tuple
    loss: float
    batch_index: int
    sampler_id: str
    ensemble_losses: tuple

    def __post_init__(self):
        if len(self.ensemble_losses) == 0:
            raise ValueError("ensemble_losses must be non-empty")
        if not _NAME_RE.match(self.sampler_id):
            raise ValueError(f"invalid sampler id {self.sampler_id!r}")
        expected = float(np.mean(np.asarray(self.ensemble_losses, dtype=float)))
        if not (self.loss == expected or (math.isnan(self.loss) and math.isnan(expected))):
            raise ValueError("loss must equal the mean of ensemble_losses")

    @classmethod
    def from_ensemble(cls, params, batch_index, sampler_id, ensemble_losses):
        ensemble = tuple(float(v) for v in ensemble_losses)
        loss = float(np.mean(np.asarray(ensemble, dtype=float)))
        return cls(tuple(float(p) for p in params), loss, int(batch_index), sampler_id, ensemble)


@dataclass
class CalibrationState:
    """Append-only history of a calibration run.

    Mutated only by the orchestration loop; samplers and exporters read
    immutable array snapshots.
    """

    space: ParameterSpace
    master_seed: int
    records: list = field(default_factory=list)
    batch_count: int = 0
    _seen: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        self._seen = {self.space.to_indices(r.params) for r in self.records}
        if len(self._seen) != len(self.records):
            raise ValueError("duplicate parameter vectors in history")

    @property
    def seen_indices(self):
        return frozenset(self._seen)

    def append(self, record):
        key = self.space.to_indices(record.params)
        if key in self._seen:
            raise ValueError(f"duplicate evaluation of {record.params}")
        self._seen.add(key)
        self.records.append(record)

    def params_array(self):
        """n x d array of evaluated coordinates, in insertion order."""
        if not self.records:
            return np.empty((0, self.space.dimension))
        return np.array([r.params for r in self.records])

    def losses_array(self):
        return np.array([r.loss for r in self.records]) if self.records else np.empty(0)


def best_loss(state):
    """Minimum loss and the first record attaining it.

    Ties break by insertion order.  Raises InsufficientDataError on an
    empty history.
    """
    if not state.records:
        raise InsufficientDataError("no evaluations")
    losses = state.losses_array()
    idx = int(np.argmin(losses))
    return losses[idx], state.records[idx]


# ---------------------------------------------------------------------------
# Deterministic seeding
# ---------------------------------------------------------------------------


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(*values):
    s = _splitmix64(values[0] & _MASK64)
    for v in values[1:]:
        s = _splitmix64(s ^ _splitmix64(v & _MASK64))
    return s


def derive_seed(master_seed, batch_index, point_index, ensemble_index):
    """Stable 64-bit seed for one simulation of one candidate point.

    Pure function of the index tuple, identical across runs and platforms,
    with negligible collision probability over practical index ranges.
    Enables parallel evaluation without nondeterminism.
    """
    for v in (batch_index, point_index, ensemble_index):
        if v < 0:
            raise ValueError("indices must be non-negative")
    return _mix(master_seed, LANE_SIMULATION, batch_index, point_index, ensemble_index)


def stream_seed(master_seed, lane, index):
    """Seed for an internal per-batch RNG stream (sampler, scheduler, ...)."""
    return _mix(master_seed, lane, index, 0)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

_CHECKPOINT_HEADER = "calibkit-checkpoint v1"


def _fmt_float(x):
    return repr(float(x))


def checkpoint_save(state, scheduler_state, path):
    """Write the run state as a versioned line-oriented text file.

    Reals are serialized with their shortest round-trip representation so
    that load(save(x)) reproduces x bit for bit.  ``scheduler_state`` is an
    opaque byte string stored base64-encoded.
    """
    lines = [_CHECKPOINT_HEADER]
    lines.append(f"master_seed={state.master_seed}")
    lines.append(f"batch_count={state.batch_count}")
    lines.append(f"dims={state.space.dimension}")
    for d in state.space.dims:
        lines.append(f"dim\t{d.name}\t{_fmt_float(d.lower)}\t{_fmt_float(d.upper)}\t{_fmt_float(d.step)}")
    lines.append(f"records={len(state.records)}")
    for r in state.records:
        coords = ",".join(_fmt_float(c) for c in r.params)
        ens = ",".join(_fmt_float(v) for v in r.ensemble_losses)
        lines.append(f"{r.batch_index}\t{r.sampler_id}\t{coords}\t{ens}\t{_fmt_float(r.loss)}")
    blob = base64.b64encode(scheduler_state).decode("ascii") if scheduler_state else "-"
    lines.append(f"scheduler={blob}")
    lines.append("end")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    import os

    os.replace(tmp, path)


class _LineReader:
    def __init__(self, path, lines):
        self.path = path
        self.lines = lines
        self.pos = 0

    def next(self, what):
        if self.pos >= len(self.lines):
            raise CheckpointFormatError(self.path, self.pos + 1, f"unexpected end of file, expected {what}")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def error(self, message):
        raise CheckpointFormatError(self.path, self.pos, message)


def _parse_kv(reader, key):
    line = reader.next(f"{key}=...")
    if not line.startswith(key + "="):
        reader.error(f"expected {key}=..., got {line!r}")
    try:
        return int(line[len(key) + 1 :])
    except ValueError:
        reader.error(f"invalid integer for {key}")


def checkpoint_load(path):
    """Read a checkpoint file back into (CalibrationState, scheduler bytes)."""
    try:
        with open(path, encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise CheckpointFormatError(path, 0, "file not found") from None
    reader = _LineReader(path, lines)
    header = reader.next("header")
    if not header.startswith("calibkit-checkpoint"):
        reader.error("not a calibkit checkpoint file")
    if header != _CHECKPOINT_HEADER:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {header!r}")
    master_seed = _parse_kv(reader, "master_seed")
    batch_count = _parse_kv(reader, "batch_count")
    n_dims = _parse_kv(reader, "dims")
    dims = []
    for _ in range(n_dims):
        parts = reader.next("dim line").split("\t")
        if len(parts) != 5 or parts[0] != "dim":
            reader.error("malformed dim line")
        try:
            dims.append(ParameterDim(parts[1], float(parts[2]), float(parts[3]), float(parts[4])))
        except ValueError as exc:
            reader.error(f"invalid dimension: {exc}")
    space = ParameterSpace(tuple(dims))
    n_records = _parse_kv(reader, "records")
    records = []
    for _ in range(n_records):
        parts = reader.next("record line").split("\t")
        if len(parts) != 5:
            reader.error("malformed record line")
        try:
            batch_index = int(parts[0])
            coords = tuple(float(v) for v in parts[2].split(","))
            ens = tuple(float(v) for v in parts[3].split(","))
            loss = float(parts[4])
            records.append(EvaluationRecord(coords, loss, batch_index, parts[1], ens))
        except ValueError as exc:
            reader.error(f"invalid record: {exc}")
    sched_line = reader.next("scheduler line")
    if not sched_line.startswith("scheduler="):
        reader.error("expected scheduler=...")
    blob = sched_line[len("scheduler=") :]
    try:
        scheduler_state = b"" if blob == "-" else base64.b64decode(blob, validate=True)
    except Exception:
        reader.error("invalid scheduler payload")
    if reader.next("end marker") != "end":
        reader.error("missing end marker")
    try:
        state = CalibrationState(space, master_seed, records, batch_count)
    except ValueError as exc:
        reader.error(str(exc))
    return state, scheduler_state
