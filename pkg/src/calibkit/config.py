"""Run definition files: parsing, validation and default resolution.

A run is defined by a YAML document with sections model, loss,
preprocessing, strategy (or benchmark), budget, seeds and output.  Unknown
keys are rejected with their full dotted path.  After resolution every
default is materialized, and the resolved document is echoed next to the
outputs so a run can be reproduced exactly from its own artifacts.
"""

import os
from pathlib import Path

import numpy as np
import yaml

from calibkit.calibrator import BenchmarkConfig, CalibrationConfig, Strategy
from calibkit.core import ParameterDim, ParameterSpace
from calibkit.losses import SeriesPanel, parse_transform, preprocess_panel, read_panel_csv
from calibkit.models import build_model, make_pseudo_true_task
from calibkit.samplers import SAMPLER_IDS

WORKERS_ENV_VAR = "CALIBKIT_WORKERS"


class ConfigError(ValueError):
    """Invalid or unparseable run configuration."""


def _require(condition, path, message):
    if not condition:
        raise ConfigError(f"{path}: {message}")


def _check_keys(section, allowed, path):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


_TOP_KEYS = ("model", "loss", "preprocessing", "strategy", "benchmark", "budget", "seeds", "output")
_TARGET_KINDS = ("zeros", "pseudo_true", "csv")


def default_workers():
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"environment variable {WORKERS_ENV_VAR} must be an integer") from None
    return os.cpu_count() or 1


def resolve_config(raw, benchmark=False):
    """Validate a raw config mapping and fill in every default.

    Returns a plain dict that fully determines the run and can be dumped
    back to YAML.  With benchmark=True a 'benchmark' section is required
    instead of 'strategy'.
    """
    _check_keys(raw, _TOP_KEYS, "config")
    resolved = {}

    model_cfg = raw.get("model")
    _require(isinstance(model_cfg, dict), "model", "section is required")
    _check_keys(model_cfg, ("name", "settings", "space"), "model")
    _require("name" in model_cfg, "model.name", "is required")
    resolved["model"] = {
        "name": model_cfg["name"],
        "settings": model_cfg.get("settings") or {},
        "space": model_cfg.get("space") or {},
    }
    for dim_name, spec in resolved["model"]["space"].items():
        _check_keys(spec, ("lower", "upper", "step"), f"model.space.{dim_name}")
        _require("lower" in spec and "upper" in spec, f"model.space.{dim_name}", "needs lower and upper")

    loss_cfg = raw.get("loss")
    _require(isinstance(loss_cfg, dict), "loss", "section is required")
    _check_keys(loss_cfg, ("kind", "weight_floor", "target"), "loss")
    kind = loss_cfg.get("kind", "moments")
    _require(kind in ("moments", "euclidean"), "loss.kind", f"must be moments or euclidean, got {kind!r}")
    target = loss_cfg.get("target")
    _require(isinstance(target, dict), "loss.target", "section is required")
    _check_keys(target, ("kind", "path", "params", "seed", "n_steps", "burn_in"), "loss.target")
    tkind = target.get("kind")
    _require(tkind in _TARGET_KINDS, "loss.target.kind", f"must be one of {_TARGET_KINDS}, got {tkind!r}")
    if tkind == "csv":
        _require("path" in target, "loss.target.path", "is required for csv targets")
    if tkind == "pseudo_true":
        _require("params" in target, "loss.target.params", "is required for pseudo_true targets")
    resolved["loss"] = {
        "kind": kind,
        "weight_floor": float(loss_cfg.get("weight_floor", 1e-12)),
        "target": {
            "kind": tkind,
            "path": target.get("path"),
            "params": target.get("params"),
            "seed": int(target.get("seed", 987_654_321)),
            # the target series may be longer than the candidate simulations:
            # moments are length-independent summaries, and a long target
            # pins the real moments down precisely
            "n_steps": target.get("n_steps"),
            "burn_in": target.get("burn_in"),
        },
    }

    preprocessing = raw.get("preprocessing") or {}
    _require(isinstance(preprocessing, dict), "preprocessing", "must be a mapping")
    for dim_name, chain in preprocessing.items():
        _require(isinstance(chain, list), f"preprocessing.{dim_name}", "must be a list of transforms")
        for spec in chain:
            try:
                parse_transform(spec)
            except ValueError as exc:
                raise ConfigError(f"preprocessing.{dim_name}: {exc}") from None
    resolved["preprocessing"] = {k: list(v) for k, v in preprocessing.items()}

    budget = raw.get("budget") or {}
    _check_keys(budget, ("batch_size", "ensemble_size", "n_batches", "n_steps", "burn_in"), "budget")
    _require("n_batches" in budget, "budget.n_batches", "is required")
    _require("n_steps" in budget, "budget.n_steps", "is required")
    resolved["budget"] = {
        "batch_size": int(budget.get("batch_size", 4)),
        "ensemble_size": int(budget.get("ensemble_size", 5)),
        "n_batches": int(budget["n_batches"]),
        "n_steps": int(budget["n_steps"]),
        "burn_in": int(budget.get("burn_in", 0)),
    }
    for key in ("batch_size", "ensemble_size", "n_batches", "n_steps"):
        _require(resolved["budget"][key] >= 1, f"budget.{key}", "must be >= 1")
    _require(resolved["budget"]["burn_in"] >= 0, "budget.burn_in", "must be >= 0")
    if kind == "euclidean":
        t_steps = resolved["loss"]["target"]["n_steps"]
        _require(
            t_steps is None or int(t_steps) == resolved["budget"]["n_steps"],
            "loss.target.n_steps",
            "must match budget.n_steps for the euclidean loss (panels are compared pointwise)",
        )

    seeds = raw.get("seeds") or {}
    _check_keys(seeds, ("master_seed",), "seeds")
    resolved["seeds"] = {"master_seed": int(seeds.get("master_seed", 0))}

    output = raw.get("output") or {}
    _check_keys(output, ("dir", "workers", "plots"), "output")
    workers = output.get("workers")
    resolved["output"] = {
        "dir": output.get("dir"),
        "workers": int(workers) if workers is not None else default_workers(),
        "plots": bool(output.get("plots", True)),
    }
    _require(resolved["output"]["workers"] >= 1, "output.workers", "must be >= 1")

    if benchmark:
        _require("benchmark" in raw, "benchmark", "section is required for the benchmark command")
        _require("strategy" not in raw, "strategy", "not allowed together with a benchmark section")
        bench = raw["benchmark"]
        _check_keys(bench, ("repetitions", "seed_schedule", "strategies"), "benchmark")
        strategies = bench.get("strategies")
        _require(isinstance(strategies, list) and strategies, "benchmark.strategies", "must be a non-empty list")
        resolved["benchmark"] = {
            "repetitions": int(bench.get("repetitions", 3)),
            "seed_schedule": bench.get("seed_schedule"),
            "strategies": [
                _resolve_strategy(s, f"benchmark.strategies[{i}]") for i, s in enumerate(strategies)
            ],
        }
        _require(resolved["benchmark"]["repetitions"] >= 1, "benchmark.repetitions", "must be >= 1")
    else:
        _require("strategy" in raw, "strategy", "section is required")
        _require("benchmark" not in raw, "benchmark", "not allowed together with a strategy section")
        resolved["strategy"] = _resolve_strategy(raw["strategy"], "strategy")
    return resolved


def _resolve_strategy(section, path):
    _check_keys(section, ("kind", "sampler", "samplers", "arms", "epsilon", "alpha", "options", "label"), path)
    kind = section.get("kind")
    _require(kind in ("single", "round_robin", "bandit"), f"{path}.kind", f"must be single, round_robin or bandit, got {kind!r}")
    # 'arms' is the canonical spelling used in echoed resolved configs;
    # 'sampler'/'samplers' are the friendlier aliases for hand-written files
    if kind == "single":
        _require("sampler" in section or "arms" in section, f"{path}.sampler", "is required for single strategies")
        arms = [section["sampler"]] if "sampler" in section else list(section["arms"])
        _require(len(arms) == 1, f"{path}.arms", "single strategies take exactly one arm")
    elif kind == "round_robin":
        source = section.get("samplers", section.get("arms"))
        _require(isinstance(source, list), f"{path}.samplers", "must be a list")
        arms = list(source)
    else:
        _require(isinstance(section.get("arms"), list), f"{path}.arms", "must be a list")
        arms = list(section["arms"])
    for arm in arms:
        _require(arm in SAMPLER_IDS, f"{path}", f"unknown sampler id {arm!r}; known: {SAMPLER_IDS}")
    options = section.get("options") or {}
    for arm in options:
        _require(arm in arms, f"{path}.options.{arm}", "options given for an arm not in the strategy")
    return {
        "kind": kind,
        "arms": arms,
        "epsilon": float(section.get("epsilon", 0.1)),
        "alpha": float(section.get("alpha", 0.1)),
        "options": options,
        "label": section.get("label"),
    }


def _build_space(model, space_overrides):
    if not space_overrides:
        return model.default_space()
    default = model.default_space()
    _require(
        set(space_overrides) <= set(model.param_names),
        "model.space",
        f"unknown dimensions {sorted(set(space_overrides) - set(model.param_names))}; model has {model.param_names}",
    )
    dims = []
    for dim in default.dims:
        spec = space_overrides.get(dim.name)
        if spec is None:
            dims.append(dim)
        else:
            lower, upper = float(spec["lower"]), float(spec["upper"])
            step = float(spec.get("step", (upper - lower) / 100.0))
            try:
                dims.append(ParameterDim(dim.name, lower, upper, step))
            except ValueError as exc:
                raise ConfigError(f"model.space.{dim.name}: {exc}") from None
    return ParameterSpace(tuple(dims))


def _build_target(resolved, model, space):
    target = resolved["loss"]["target"]
    budget = resolved["budget"]
    transforms = resolved["preprocessing"]
    if target["kind"] == "zeros":
        panel = SeriesPanel(np.zeros((model.output_dims, budget["n_steps"])), model.dim_names)
    elif target["kind"] == "csv":
        try:
            panel = read_panel_csv(target["path"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"loss.target.path: {exc}") from None
    else:
        params = target["params"]
        if isinstance(params, dict):
            missing = set(model.param_names) - set(params)
            _require(not missing, "loss.target.params", f"missing parameters {sorted(missing)}")
            extra = set(params) - set(model.param_names)
            _require(not extra, "loss.target.params", f"unknown parameters {sorted(extra)}")
            vector = [float(params[name]) for name in model.param_names]
        else:
            vector = [float(v) for v in params]
            _require(
                len(vector) == len(model.param_names),
                "loss.target.params",
                f"expected {len(model.param_names)} values",
            )
        snapped = space.to_coords(space.snap_indices(np.array([vector]))[0])
        t_steps = target.get("n_steps") or budget["n_steps"]
        t_burn = target.get("burn_in") if target.get("burn_in") is not None else budget["burn_in"]
        task = make_pseudo_true_task(model, snapped, t_steps, t_burn, target["seed"], space=space)
        panel = task.real_panel
    if transforms:
        try:
            panel = preprocess_panel(panel, transforms)
        except ValueError as exc:
            raise ConfigError(f"preprocessing: {exc}") from None
    return panel


def _strategy_from_resolved(spec):
    return Strategy(
        kind=spec["kind"],
        arms=tuple(spec["arms"]),
        epsilon=spec["epsilon"],
        alpha=spec["alpha"],
        sampler_options=spec["options"],
        label=spec["label"],
    )


def build_calibration(resolved, output_dir=None, master_seed=None, workers=None):
    """Construct the runtime CalibrationConfig from a resolved config dict."""
    try:
        model = build_model(resolved["model"]["name"], resolved["model"]["settings"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    space = _build_space(model, resolved["model"]["space"])
    target = _build_target(resolved, model, space)
    budget = resolved["budget"]
    strategy = _strategy_from_resolved(resolved["strategy"])
    return CalibrationConfig(
        model=model,
        space=space,
        target=target,
        strategy=strategy,
        loss_kind=resolved["loss"]["kind"],
        weight_floor=resolved["loss"]["weight_floor"],
        preprocess=resolved["preprocessing"],
        batch_size=budget["batch_size"],
        ensemble_size=budget["ensemble_size"],
        n_batches=budget["n_batches"],
        n_steps=budget["n_steps"],
        burn_in=budget["burn_in"],
        master_seed=master_seed if master_seed is not None else resolved["seeds"]["master_seed"],
        workers=workers if workers is not None else resolved["output"]["workers"],
        output_dir=output_dir,
    )


def build_benchmark(resolved, output_dir=None, master_seed=None, workers=None):
    """Construct the runtime BenchmarkConfig from a resolved config dict."""
    bench = resolved["benchmark"]
    strategies = [_strategy_from_resolved(s) for s in bench["strategies"]]
    base_resolved = dict(resolved)
    base_resolved["strategy"] = bench["strategies"][0]
    base = build_calibration(base_resolved, None, master_seed, workers)
    return BenchmarkConfig(
        base=base,
        strategies=strategies,
        repetitions=bench["repetitions"],
        seed_schedule=list(bench["seed_schedule"]) if bench["seed_schedule"] else None,
        output_dir=output_dir,
    )


def write_resolved(resolved, path):
    with open(path, "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True, default_flow_style=False)
