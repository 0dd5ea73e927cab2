"""Aggregated evaluation reports: RMSE case grid, timing table, figures.

Case windows follow the two benchmark scenarios: a single-set-point run is
scored over the transient (I), the steady tail (II) and the whole horizon
(III); a set-point-change run over the post-switch transient (IV), the second
steady period (V) and the whole horizon (VI).  The report renders matplotlib
figures to files next to the delimited tables; every cell is traceable to a
run directory and seed.
"""

from __future__ import annotations

import glob
import json
import os
from collections import defaultdict

import numpy as np

__all__ = ["case_windows", "aggregate_runs", "write_report", "render_figures"]

CASES = ("I", "II", "III", "IV", "V", "VI")

# per-step timing of the original benchmark study (s/step), for orientation
# in the timing table; measured values live alongside, never merged
REFERENCE_TIMING = {"FullKMPC": 0.0734, "ReducedKMPC": 0.0405, "ReducedRKMPC": 0.0407}

TRANSIENT_WINDOW = 1.5  # hours; timing is averaged over this initial window


def case_windows(scenario) -> dict:
    """Evaluation windows (hours) appropriate for the scenario's schedule."""
    if len(scenario.setpoints) == 1:
        h = scenario.horizon
        return {"I": (0.0, min(1.5, h)), "II": (min(1.5, h), h), "III": (0.0, h)}
    t_switch = scenario.setpoints[1].activation_time
    h = scenario.horizon
    return {"IV": (t_switch, min(t_switch + 1.5, h)),
            "V": (min(t_switch + 1.5, h), h),
            "VI": (0.0, h)}


def _load_runs(out_dir):
    runs = []
    for run_json in sorted(glob.glob(os.path.join(out_dir, "control", "*", "run.json"))):
        rdir = os.path.dirname(run_json)
        with open(run_json) as f:
            info = json.load(f)
        summary_path = os.path.join(rdir, "trajectory_summary.json")
        if not os.path.exists(summary_path):
            continue
        with open(summary_path) as f:
            summary = json.load(f)
        runs.append({"dir": rdir, "info": info, "summary": summary})
    return runs


def _timing_mean_transient(rdir) -> float:
    """Mean per-step condensing+solve time over the initial transient window."""
    import csv
    path = os.path.join(rdir, "trajectory.csv")
    times = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            if row["solve_time"] == "":
                continue
            if float(row["t"]) < TRANSIENT_WINDOW:
                times.append(float(row["solve_time"]))
    return float(np.mean(times)) if times else float("nan")


def aggregate_runs(out_dir) -> dict:
    """Collect case RMSEs and timing per controller from all run directories."""
    runs = _load_runs(out_dir)
    grid = defaultdict(lambda: defaultdict(list))     # controller -> case -> values
    provenance = defaultdict(lambda: defaultdict(list))
    timing = defaultdict(list)
    for run in runs:
        controller = run["info"]["controller"]
        seed = run["info"]["seed"]
        for case, value in (run["summary"].get("rmse_summary") or {}).items():
            grid[controller][case].append(float(value))
            provenance[controller][case].append(
                {"dir": os.path.basename(run["dir"]), "seed": seed})
        timing[controller].append(_timing_mean_transient(run["dir"]))
    return {"grid": {c: dict(v) for c, v in grid.items()},
            "provenance": {c: dict(v) for c, v in provenance.items()},
            "timing": {c: v for c, v in timing.items()},
            "n_runs": len(runs)}


def write_report(out_dir, report_dir=None) -> dict:
    """Write the RMSE grid and timing tables (CSV + JSON with provenance)."""
    report_dir = report_dir or os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    agg = aggregate_runs(out_dir)

    grid_path = os.path.join(report_dir, "rmse_grid.csv")
    with open(grid_path, "w") as f:
        f.write("controller," + ",".join(f"case_{c}" for c in CASES) + "\n")
        for controller in sorted(agg["grid"]):
            cells = []
            for c in CASES:
                vals = agg["grid"][controller].get(c)
                cells.append(repr(float(np.median(vals))) if vals else "")
            f.write(controller + "," + ",".join(cells) + "\n")

    timing_path = os.path.join(report_dir, "timing.csv")
    with open(timing_path, "w") as f:
        f.write("controller,mean_step_time_s,reference_step_time_s\n")
        for controller in sorted(agg["timing"]):
            vals = [v for v in agg["timing"][controller] if np.isfinite(v)]
            mean_t = float(np.mean(vals)) if vals else float("nan")
            ref = REFERENCE_TIMING.get(controller, float("nan"))
            f.write(f"{controller},{mean_t!r},{ref!r}\n")
        t_full = [v for v in agg["timing"].get("FullKMPC", []) if np.isfinite(v)]
        t_red = [v for v in agg["timing"].get("ReducedKMPC", []) if np.isfinite(v)]
        if t_full and t_red:
            ratio = float(np.mean(t_red) / np.mean(t_full))
            ref_ratio = REFERENCE_TIMING["ReducedKMPC"] / REFERENCE_TIMING["FullKMPC"]
            f.write(f"ratio_reduced_over_full,{ratio!r},{ref_ratio!r}\n")

    with open(os.path.join(report_dir, "report.json"), "w") as f:
        json.dump(agg, f, indent=2, sort_keys=True)
        f.write("\n")
    return agg


def render_figures(out_dir, report_dir=None) -> list:
    """Render trajectory, RMSE, spectrum and prediction figures to PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 120, "font.size": 9,
                         "axes.grid": True, "grid.alpha": 0.3})

    report_dir = report_dir or os.path.join(out_dir, "report")
    fig_dir = os.path.join(report_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []

    state_labels = ["xA1", "xB1", "T1 (K)", "xA2", "xB2", "T2 (K)",
                    "xA3", "xB3", "T3 (K)"]
    colors = {"FullKMPC": "tab:green", "ReducedKMPC": "tab:orange",
              "ReducedRKMPC": "tab:blue"}

    # group runs by scenario, keep the first seed of each controller
    runs = _load_runs(out_dir)
    by_scenario = defaultdict(dict)
    for run in runs:
        key = run["info"]["scenario"]
        ctrl = run["info"]["controller"]
        by_scenario[key].setdefault(ctrl, run)

    import csv as _csv

    def read_traj(rdir):
        path = os.path.join(rdir, "trajectory.csv")
        t, X, U = [], [], []
        with open(path, newline="") as f:
            for row in _csv.DictReader(f):
                t.append(float(row["t"]))
                X.append([float(row[f"x{i+1}"]) for i in range(9)])
                if row.get("u1", ""):
                    U.append([float(row[f"u{j+1}"]) for j in range(3)])
        return np.array(t), np.array(X), np.array(U)

    for scen, ctrl_runs in by_scenario.items():
        fig, axes = plt.subplots(3, 3, figsize=(10, 7), sharex=True)
        for ctrl, run in sorted(ctrl_runs.items()):
            t, X, _ = read_traj(run["dir"])
            for i, ax in enumerate(axes.flat):
                ax.plot(t, X[:, i], color=colors.get(ctrl, "k"),
                        label=ctrl, linewidth=1.0)
        for i, ax in enumerate(axes.flat):
            ax.set_ylabel(state_labels[i])
            if i >= 6:
                ax.set_xlabel("t (h)")
        axes.flat[0].legend(fontsize=7)
        fig.suptitle(f"closed-loop states: {scen}")
        fig.tight_layout()
        path = os.path.join(fig_dir, f"states_{scen}.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        fig, axes = plt.subplots(3, 1, figsize=(8, 6), sharex=True)
        for ctrl, run in sorted(ctrl_runs.items()):
            t, _, U = read_traj(run["dir"])
            for j, ax in enumerate(axes):
                ax.step(t[:-1], U[:, j], where="post",
                        color=colors.get(ctrl, "k"), label=ctrl, linewidth=1.0)
        for j, ax in enumerate(axes):
            ax.set_ylabel(f"Q{j+1} (kJ/h)")
        axes[-1].set_xlabel("t (h)")
        axes[0].legend(fontsize=7)
        fig.suptitle(f"heat inputs: {scen}")
        fig.tight_layout()
        path = os.path.join(fig_dir, f"inputs_{scen}.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    # RMSE grid bars
    agg = aggregate_runs(out_dir)
    if agg["grid"]:
        fig, ax = plt.subplots(figsize=(8, 4))
        controllers = sorted(agg["grid"])
        width = 0.8 / max(len(controllers), 1)
        xs = np.arange(len(CASES))
        for i, ctrl in enumerate(controllers):
            vals = [np.median(agg["grid"][ctrl].get(c, [np.nan])) for c in CASES]
            ax.bar(xs + i * width, vals, width,
                   color=colors.get(ctrl, "gray"), label=ctrl)
        ax.set_xticks(xs + width * (len(controllers) - 1) / 2)
        ax.set_xticklabels([f"Case {c}" for c in CASES])
        ax.set_ylabel("scaled tracking RMSE")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(fig_dir, "rmse_cases.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    # eigenvalue spectrum + open-loop validation predictions, when identified
    eig_path = os.path.join(out_dir, "ident", "eigvals.csv")
    if os.path.exists(eig_path):
        data = np.genfromtxt(eig_path, delimiter=",", skip_header=1)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        vals = np.maximum(data[:, 1], 1e-300)
        ax.semilogy(data[:, 0], vals, "o-", markersize=3)
        ax.set_xlabel("mode")
        ax.set_ylabel("covariance eigenvalue")
        fig.tight_layout()
        path = os.path.join(fig_dir, "eigenvalue_spectrum.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    for name in ("full", "reduced"):
        vp = os.path.join(out_dir, "ident", f"validation_pred_{name}.csv")
        if not os.path.exists(vp):
            continue
        rows = np.genfromtxt(vp, delimiter=",", skip_header=1)
        if rows.ndim != 2 or rows.shape[0] < 2:
            continue
        t = rows[:, 0]
        fig, axes = plt.subplots(3, 3, figsize=(10, 7), sharex=True)
        for i, ax in enumerate(axes.flat):
            ax.plot(t, rows[:, 1 + i], "k-", linewidth=1.0, label="plant")
            ax.plot(t, rows[:, 10 + i], "b-.", linewidth=1.0, label="model")
            ax.set_ylabel(state_labels[i])
            if i >= 6:
                ax.set_xlabel("t (h)")
        axes.flat[0].legend(fontsize=7)
        fig.suptitle(f"open-loop validation: {name} model")
        fig.tight_layout()
        path = os.path.join(fig_dir, f"validation_{name}.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    return written
