"""Command line surface.

Subcommands: ``calibrate`` runs one calibration from a config file,
``benchmark`` runs a strategy comparison with paired seeds, ``analyze``
estimates per-sampler values from recorded traces, and ``export-moments``
re-simulates the best point of a finished run and dumps real-versus-
simulated moment tables and series.  Exit codes: 0 success, 2 config or
usage error, 3 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from calibkit import __version__
from calibkit.calibrator import (
    CalibrationRunError,
    LossEvaluator,
    run_benchmark,
    run_calibration,
)
from calibkit.config import (
    ConfigError,
    build_benchmark,
    build_calibration,
    load_config_file,
    resolve_config,
    write_resolved,
)
from calibkit.core import CheckpointFormatError, best_loss, checkpoint_load, derive_seed
from calibkit.losses import (
    MOMENT_NAMES,
    PanelFormatError,
    panel_moments,
    preprocess_panel,
    write_panel_csv,
)
from calibkit.models import ModelExplosionError
from calibkit.scheduler import TraceFormatError, read_trace_csv, summarize_traces

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _prepare_output_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_resolved(resolved, out_dir, master_seed, workers):
    echoed = dict(resolved)
    echoed["seeds"] = {"master_seed": master_seed}
    echoed["output"] = dict(resolved["output"])
    echoed["output"]["dir"] = str(out_dir)
    if workers is not None:
        echoed["output"]["workers"] = workers
    write_resolved(echoed, out_dir / "resolved_config.yaml")
    return echoed


def _progress_printer(n_batches):
    def progress(batch_index, arm, batch_min, best):
        print(
            f"batch {batch_index + 1:>4}/{n_batches}  arm={arm:<3}  "
            f"batch_min={batch_min:.6g}  best={best:.6g}",
            flush=True,
        )

    return progress


def cmd_calibrate(args):
    resolved = resolve_config(load_config_file(args.config))
    out_dir = args.output or resolved["output"]["dir"]
    if out_dir is None:
        raise ConfigError("output.dir: set it in the config or pass --output")
    out_dir = _prepare_output_dir(out_dir, args.force)
    master_seed = args.master_seed if args.master_seed is not None else resolved["seeds"]["master_seed"]
    config = build_calibration(resolved, output_dir=out_dir, master_seed=master_seed, workers=args.workers)
    _echo_resolved(resolved, out_dir, master_seed, config.workers)

    resume_from = out_dir / "checkpoint.txt" if args.resume else None
    if resume_from is not None and not resume_from.exists():
        raise ConfigError(f"--resume: no checkpoint at {resume_from}")
    result = run_calibration(config, resume_from=resume_from, progress=_progress_printer(config.n_batches))

    loss, record = result.best
    print(f"best loss {loss:.8g} at {dict(zip(config.space.names, record.params))}")
    if resolved["output"]["plots"]:
        _render_run_figures(result, out_dir)
    return EXIT_OK


def _render_run_figures(result, out_dir):
    from calibkit import plotting

    evals = np.array([c[1] for c in result.convergence])
    best = np.array([c[2] for c in result.convergence])
    label = result.trace[-1].arm if result.trace else "run"
    plotting.save_convergence_plot(
        {"run": (evals, best, np.zeros_like(best))}, out_dir / "convergence.png"
    )
    if result.trace:
        plotting.save_actions_plot({"run": result.trace}, out_dir / "actions.png")


def cmd_benchmark(args):
    resolved = resolve_config(load_config_file(args.config), benchmark=True)
    out_dir = args.output or resolved["output"]["dir"]
    if out_dir is None:
        raise ConfigError("output.dir: set it in the config or pass --output")
    out_dir = _prepare_output_dir(out_dir, args.force)
    master_seed = args.master_seed if args.master_seed is not None else resolved["seeds"]["master_seed"]
    config = build_benchmark(resolved, output_dir=out_dir, master_seed=master_seed, workers=args.workers)
    _echo_resolved(resolved, out_dir, master_seed, config.base.workers)

    def progress(label, rep):
        print(f"running strategy {label} repetition {rep + 1}/{config.repetitions}", flush=True)

    result = run_benchmark(config, progress=progress)
    print(f"{'strategy':<16} {'mean_final':>12} {'se_final':>10}")
    for label, stat in result.stats.items():
        print(f"{label:<16} {stat.mean_final:>12.6g} {stat.se_final:>10.3g}")
    if resolved["output"]["plots"]:
        from calibkit import plotting

        curves = {
            label: (stat.evaluations, stat.mean_curve, stat.se_curve)
            for label, stat in result.stats.items()
        }
        plotting.save_convergence_plot(curves, out_dir / "benchmark_curves.png")
        traces = {
            f"{label}/rep{rep}": result.results[(label, rep)].trace
            for (label, rep) in result.results
            if result.results[(label, rep)].trace
        }
        if traces:
            plotting.save_actions_plot(traces, out_dir / "actions.png")
    return EXIT_OK


def _format_q(value):
    return f"{value:.4g}" if value is not None else "n.a."


def cmd_analyze(args):
    traces = [read_trace_csv(p) for p in args.traces]
    table = summarize_traces(traces)
    columns = ("single", "global", "high", "low") if args.contextual else ("single", "global")
    print(f"{'arm':<6}" + "".join(f"{c:>12}" for c in columns))
    for arm in table["arms"]:
        cells = [table["columns"][c].get(arm) for c in columns]
        print(f"{arm:<6}" + "".join(f"{_format_q(v):>12}" for v in cells))
    if args.contextual:
        print(f"pooled median best loss: {table['median']:.6g}")
    if args.output:
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        import csv as _csv

        with open(out_dir / "q_table.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["arm", "single", "global", "high", "low"])
            for arm in table["arms"]:
                writer.writerow(
                    [arm]
                    + [
                        "" if table["columns"][c].get(arm) is None else repr(table["columns"][c][arm])
                        for c in ("single", "global", "high", "low")
                    ]
                )
        from calibkit import plotting

        named = {Path(p).parent.name or f"trace{i}": t for i, (p, t) in enumerate(zip(args.traces, traces))}
        plotting.save_actions_plot(named, out_dir / "actions.png")
        print(f"wrote {out_dir / 'q_table.csv'}")
    return EXIT_OK


def cmd_export_moments(args):
    run_dir = Path(args.run_dir)
    checkpoint_path = run_dir / "checkpoint.txt"
    config_path = run_dir / "resolved_config.yaml"
    if not checkpoint_path.exists():
        raise ConfigError(f"no checkpoint in run directory {run_dir}")
    if not config_path.exists():
        raise ConfigError(f"no resolved_config.yaml in run directory {run_dir}")
    state, _ = checkpoint_load(checkpoint_path)
    with open(config_path) as fh:
        resolved = yaml.safe_load(fh)
    if args.real_csv is not None:
        resolved["loss"]["target"] = {"kind": "csv", "path": args.real_csv, "params": None, "seed": 0}
    config = build_calibration(resolved)
    if config.space != state.space:
        raise ConfigError("resolved config space does not match the checkpoint")

    loss, record = best_loss(state)
    point_index = [r for r in state.records if r.batch_index == record.batch_index].index(record)
    seeds = [
        derive_seed(state.master_seed, record.batch_index, point_index, e)
        for e in range(len(record.ensemble_losses))
    ]
    panels = config.model.simulate_ensemble(
        np.asarray(record.params), config.n_steps, config.burn_in, seeds
    )
    if config.preprocess:
        panels = [preprocess_panel(p, config.preprocess) for p in panels]
    evaluator = LossEvaluator(config.target, config.loss_kind, config.weight_floor)
    member_losses = [evaluator(p) for p in panels]
    recomputed = float(np.mean(member_losses))
    print(f"checkpoint best loss : {float(loss)!r}")
    print(f"recomputed loss      : {recomputed!r}")
    if abs(recomputed - loss) > 1e-9 * max(1.0, abs(loss)):
        logger.warning("recomputed loss deviates from the checkpoint value")

    out_dir = Path(args.output) if args.output else run_dir / "export"
    out_dir.mkdir(parents=True, exist_ok=True)
    real_moments = panel_moments(config.target)
    sim_moments = [panel_moments(p) for p in panels]
    import csv as _csv

    with open(out_dir / "moments_real_vs_sim.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(
            ["dimension", "index", "moment", "real", "sim_mean"]
            + [f"sim_member{e}" for e in range(len(panels))]
        )
        for d in range(config.target.n_dims):
            for i, name in enumerate(MOMENT_NAMES):
                sims = [m[d, i] for m in sim_moments]
                writer.writerow(
                    [config.target.name_of(d), i + 1, name, repr(float(real_moments[d, i])), repr(float(np.mean(sims)))]
                    + [repr(float(v)) for v in sims]
                )
    write_panel_csv(config.target, out_dir / "real_series.csv")
    for e, panel in enumerate(panels):
        write_panel_csv(panel, out_dir / f"sim_series_member{e}.csv")
    from calibkit import plotting

    plotting.save_moment_comparison_plot(
        config.target, panels, real_moments, sim_moments, out_dir / "moments_comparison.png"
    )
    print(f"wrote export to {out_dir}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="calibkit",
        description="Calibrate simulation models against target series with "
        "surrogate-guided search and bandit scheduling.",
    )
    parser.add_argument("--version", action="version", version=f"calibkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="run one calibration from a config file")
    cal.add_argument("config", help="path to the run config YAML")
    cal.add_argument("--master-seed", type=int, default=None, help="override seeds.master_seed")
    cal.add_argument("--output", default=None, help="override output.dir")
    cal.add_argument("--workers", type=int, default=None, help="override output.workers")
    cal.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    cal.add_argument("--resume", action="store_true", help="resume from the checkpoint in the output directory")
    cal.set_defaults(handler=cmd_calibrate)

    ben = sub.add_parser("benchmark", help="compare strategies over repeated paired runs")
    ben.add_argument("config", help="path to the benchmark config YAML")
    ben.add_argument("--master-seed", type=int, default=None, help="override seeds.master_seed")
    ben.add_argument("--output", default=None, help="override output.dir")
    ben.add_argument("--workers", type=int, default=None, help="override output.workers")
    ben.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    ben.set_defaults(handler=cmd_benchmark)

    ana = sub.add_parser("analyze", help="offline per-sampler value estimates from trace files")
    ana.add_argument("traces", nargs="+", help="one or more trace.csv files")
    ana.add_argument("--contextual", action="store_true", help="split estimates at the median best loss")
    ana.add_argument("--output", default=None, help="directory for q_table.csv and figures")
    ana.set_defaults(handler=cmd_analyze)

    exp = sub.add_parser("export-moments", help="re-simulate the best point of a run and export comparisons")
    exp.add_argument("run_dir", help="directory of a finished calibration run")
    exp.add_argument("--real-csv", default=None, help="compare against this CSV instead of the configured target")
    exp.add_argument("--output", default=None, help="export directory (default: RUN_DIR/export)")
    exp.set_defaults(handler=cmd_export_moments)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointFormatError, TraceFormatError, PanelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CalibrationRunError, ModelExplosionError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
