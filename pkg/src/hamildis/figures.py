"""CSV and SVG outputs for sweeps, tables and rollouts.

SVGs are rendered with matplotlib's Agg-free SVG backend with a fixed hash
salt and no date metadata, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import LatentSweep, TableResult  # noqa: E402
from .rollout import write_trajectory  # noqa: E402

plt.rcParams["svg.hashsalt"] = "hamildis"
plt.rcParams["svg.fonttype"] = "none"

_SVG_META = {"Date": None, "Creator": None}
_COLORS = {"consci": "tab:blue", "baseline": "tab:orange", "truth": "black"}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def write_sweep(sweeps: dict, task: str, out_dir) -> list[Path]:
    """``sweeps`` maps model kind to :class:`LatentSweep`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"sweep_{task}.csv"
    names = None
    for sweep in sweeps.values():
        names = sweep.param_names
        break
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", *(names or ()), "z1", "z2", "z3"])
        for kind, sweep in sweeps.items():
            for row, act in zip(sweep.params, sweep.activations):
                w.writerow([kind, *map(repr, row.tolist()), *map(repr, act.tolist())])

    fig, axes = plt.subplots(1, max(1, len(sweeps)), figsize=(5 * max(1, len(sweeps)), 4), squeeze=False)
    for ax, (kind, sweep) in zip(axes[0], sweeps.items()):
        x = sweep.params[:, 0]
        for i in range(sweep.activations.shape[1]):
            ax.plot(x, sweep.activations[:, i], ".", ms=3, label=f"z{i + 1}")
        ax.set_xlabel(sweep.param_names[0])
        ax.set_ylabel("latent mean")
        ax.set_title(kind)
        ax.legend()
    return [csv_path, _save(fig, out_dir / f"sweep_{task}.svg")]


def write_table(table: TableResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"table_{table.number}.csv"

    def fmt(x):
        return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([table.param, "baseline_mse", "consci_mse", "baseline_true_drift", "consci_true_drift",
                    "consci_learned_drift", "partial"])
        for r in table.rows:
            w.writerow([
                f"{r.value:g}",
                fmt(r.mse.get("baseline")),
                fmt(r.mse.get("consci")),
                "" if "baseline" not in r.true_drift else f"{r.true_drift['baseline']:.6e}",
                "" if "consci" not in r.true_drift else f"{r.true_drift['consci']:.6e}",
                "" if "consci" not in r.learned_drift else f"{r.learned_drift['consci']:.6e}",
                int(len(r.mse) < 2),
            ])
    return path


def write_rollouts(table: TableResult, out_dir) -> list[Path]:
    """One CSV, JSON sidecar and SVG per row and model."""
    out_dir = Path(out_dir)
    paths = []
    for r in table.rows:
        for kind, gen in r.generated.items():
            # labels hold decimal points, so suffixes are appended rather than swapped
            stem = f"traj_{r.label}_{kind}"
            paths.extend(write_trajectory(gen, out_dir / f"{stem}.csv"))
            paths.append(phase_time_svg(gen.times, gen.states, r.truth, out_dir / f"{stem}.svg",
                                        title=f"{kind}, {r.param}={r.value:g}", kind=kind))
    return paths


def phase_time_svg(times, states, truth, path, title: str = "", kind: str = "consci") -> Path:
    """Phase plot (q vs p) next to a time plot (q vs t); ``truth`` may be None."""
    fig, (ax_phase, ax_time) = plt.subplots(1, 2, figsize=(9, 4))
    if truth is not None and len(truth):
        ax_phase.plot(truth[:, 0], truth[:, 1], color=_COLORS["truth"], lw=1, label="truth")
        ax_time.plot(times, truth[:, 0], color=_COLORS["truth"], lw=1, label="truth")
    if len(times):
        ax_phase.plot(states[:, 0], states[:, 1], color=_COLORS.get(kind, "tab:green"), lw=1, label=kind)
        ax_time.plot(times, states[:, 0], color=_COLORS.get(kind, "tab:green"), lw=1, label=kind)
    ax_phase.set_xlabel("q")
    ax_phase.set_ylabel("p")
    ax_time.set_xlabel("t")
    ax_time.set_ylabel("q")
    if title:
        fig.suptitle(title)
    return _save(fig, Path(path))


def emit_figures(sweeps: dict, tables: list, out_dir, task: str | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if task is None and tables:
        task = tables[0].task
    if task is not None:
        paths += write_sweep(sweeps, task, out_dir)
    for table in tables:
        paths.append(write_table(table, out_dir))
        paths += write_rollouts(table, out_dir)
    return paths


__all__ = ["emit_figures", "write_sweep", "write_table", "write_rollouts", "phase_time_svg", "LatentSweep"]
