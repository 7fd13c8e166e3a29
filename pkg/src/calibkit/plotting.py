"""Figure rendering for run reports.

Every CLI command that writes delimited output also renders the matching
matplotlib figure next to it: convergence curves with standard-error
bands, the per-step action strip of a scheduled run, and the side-by-side
density/moment comparison of real versus best simulated series.  All
figures go straight to files through the Agg backend.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import gaussian_kde

from calibkit.losses import N_MOMENTS
from calibkit.scheduler import ARM_ORDER

_ARM_COLORS = {
    "H": "#888888",
    "RF": "#2a7fbf",
    "XB": "#e07b39",
    "GP": "#7b52a1",
    "BB": "#3a9e4e",
    "RND": "#c94040",
}


def _color_for(arm, index):
    return _ARM_COLORS.get(arm, f"C{index}")


def save_convergence_plot(curves, path, title="Best loss vs model evaluations"):
    """Mean cumulative-minimum curves with standard-error bands.

    ``curves`` maps a strategy label to (evaluations, mean, se) arrays.
    """
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for index, (label, (evals, mean, se)) in enumerate(curves.items()):
        color = _color_for(label, index)
        ax.plot(evals, mean, label=label, color=color, lw=1.6)
        se = np.asarray(se)
        if np.any(se > 0):
            ax.fill_between(evals, mean - se, mean + se, color=color, alpha=0.2, lw=0)
    ax.set_xlabel("model evaluations")
    ax.set_ylabel("best loss")
    finite = [m for _, (e, m, s) in curves.items() for m in np.asarray(m) if np.isfinite(m)]
    if finite and min(finite) > 0:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_actions_plot(traces, path, title="Sampler selected per batch"):
    """Colored strip of the arm chosen at every scheduled step.

    ``traces`` maps a run label to its list of TraceStep.
    """
    n = len(traces)
    fig, axes = plt.subplots(n, 1, figsize=(8, 1.1 * n + 1.2), squeeze=False, sharex=True)
    arms_seen = []
    for steps in traces.values():
        for s in steps:
            if s.arm not in arms_seen:
                arms_seen.append(s.arm)
    arms_seen.sort(key=lambda a: (ARM_ORDER.index(a) if a in ARM_ORDER else 99, a))
    for row, (label, steps) in enumerate(traces.items()):
        ax = axes[row, 0]
        for s in steps:
            ax.axvspan(s.step - 0.5, s.step + 0.5, color=_color_for(s.arm, arms_seen.index(s.arm)))
        ax.set_yticks([])
        ax.set_ylabel(label, rotation=0, ha="right", va="center", fontsize=8)
        ax.set_xlim(0.5, max((s.step for s in steps), default=1) + 0.5)
    axes[-1, 0].set_xlabel("batch")
    handles = [plt.Rectangle((0, 0), 1, 1, color=_color_for(a, i)) for i, a in enumerate(arms_seen)]
    fig.legend(handles, arms_seen, ncol=len(arms_seen), loc="upper center", frameon=False, fontsize=9)
    fig.suptitle(title, y=0.88, fontsize=10)
    fig.tight_layout(rect=(0, 0, 1, 0.86))
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_moment_comparison_plot(real_panel, sim_panels, real_moments, sim_moments, path):
    """Two-row figure per series dimension: kernel density estimates of the
    raw values on top, the 18 moment values underneath."""
    n_dims = real_panel.n_dims
    fig, axes = plt.subplots(2, n_dims, figsize=(3.2 * n_dims + 1, 6), squeeze=False)
    for d in range(n_dims):
        name = real_panel.name_of(d)
        ax = axes[0, d]
        real_vals = real_panel.values[d]
        sim_vals = np.concatenate([p.values[d] for p in sim_panels])
        grid = np.linspace(
            min(real_vals.min(), sim_vals.min()), max(real_vals.max(), sim_vals.max()), 200
        )
        for vals, label, color in ((real_vals, "real", "#2a4d8f"), (sim_vals, "simulated", "#e07b39")):
            if np.std(vals) > 0:
                ax.plot(grid, gaussian_kde(vals)(grid), label=label, color=color)
            else:
                ax.axvline(vals[0], label=label, color=color)
        ax.set_title(name, fontsize=10)
        ax.set_yticks([])
        if d == 0:
            ax.legend(frameon=False, fontsize=8)

        ax = axes[1, d]
        idx = np.arange(1, N_MOMENTS + 1)
        ax.plot(idx, real_moments[d], "o-", ms=3, lw=1, label="real", color="#2a4d8f")
        mean_sim = np.mean([m[d] for m in sim_moments], axis=0)
        ax.plot(idx, mean_sim, "s--", ms=3, lw=1, label="simulated", color="#e07b39")
        ax.set_xlabel("moment index")
        ax.axhline(0, color="#999999", lw=0.5)
        if d == 0:
            ax.set_ylabel("moment value")
            ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
