"""Plain CSV/JSON persistence for datasets, models, and closed-loop results.

Floats are written with ``repr`` (shortest round-trip), so a written file
parses back bit-exactly and rerunning a seeded pipeline reproduces outputs
byte for byte.  Wall-clock columns are inherently non-reproducible and are
kept in clearly named columns/files so determinism checks can exclude them.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .koopman import KoopmanModel, PodBasis
from .lifting import LiftingMap
from .plant import TrajectoryDataset

__all__ = [
    "save_dataset", "load_dataset",
    "save_lifting", "load_lifting",
    "save_model", "load_model",
    "save_closed_loop",
]

MODEL_FORMAT_VERSION = 1


def _fmt(v) -> str:
    return repr(float(v))


def _matrix_to_list(a):
    return [[float(v) for v in row] for row in np.atleast_2d(np.asarray(a, dtype=float))]


def save_dataset(ds: TrajectoryDataset, csv_path, json_path=None) -> None:
    """One row per sample: t, states, inputs (input cells empty on the last row)."""
    csv_path = str(csv_path)
    if json_path is None:
        json_path = os.path.splitext(csv_path)[0] + ".json"
    n = ds.n_state
    m = ds.inputs.shape[1] if ds.inputs.size else 0
    header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k in range(ds.n_samples):
            row = [_fmt(ds.t[k])] + [_fmt(v) for v in ds.states[k]]
            if k < len(ds.inputs):
                row += [_fmt(v) for v in ds.inputs[k]]
            else:
                row += [""] * m
            w.writerow(row)
    sidecar = {
        "dt": ds.dt,
        "seed": ds.seed,
        "n_state": n,
        "n_input": m,
        "meta": ds.meta,
    }
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(csv_path, json_path=None) -> TrajectoryDataset:
    csv_path = str(csv_path)
    if json_path is None:
        json_path = os.path.splitext(csv_path)[0] + ".json"
    with open(json_path) as f:
        sidecar = json.load(f)
    n, m = sidecar["n_state"], sidecar["n_input"]
    t, states, inputs = [], [], []
    with open(csv_path, newline="") as f:
        r = csv.reader(f)
        next(r)
        for row in r:
            t.append(float(row[0]))
            states.append([float(v) for v in row[1:1 + n]])
            u_cells = row[1 + n:1 + n + m]
            if u_cells and u_cells[0] != "":
                inputs.append([float(v) for v in u_cells])
    return TrajectoryDataset(states=np.array(states),
                             inputs=np.array(inputs).reshape(len(inputs), m),
                             t=np.array(t), dt=sidecar["dt"],
                             seed=sidecar["seed"], meta=sidecar.get("meta", {}))


def save_lifting(lifting: LiftingMap, path) -> None:
    with open(path, "w") as f:
        json.dump(lifting.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_lifting(path) -> LiftingMap:
    with open(path) as f:
        return LiftingMap.from_dict(json.load(f))


def save_model(model: KoopmanModel, path) -> None:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "A": _matrix_to_list(model.A),
        "B": _matrix_to_list(model.B),
        "n_state": model.n_state,
        "basis": {
            "phi_r": _matrix_to_list(model.basis.phi_r),
            "z_bar": [float(v) for v in model.basis.z_bar],
            "eigvals": [float(v) for v in model.basis.eigvals],
        },
        "lifting": model.lifting.to_dict(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(path) -> KoopmanModel:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    basis = PodBasis(phi_r=np.array(doc["basis"]["phi_r"]),
                     z_bar=np.array(doc["basis"]["z_bar"]),
                     eigvals=np.array(doc["basis"]["eigvals"]))
    return KoopmanModel(A=np.array(doc["A"]), B=np.array(doc["B"]), basis=basis,
                        lifting=LiftingMap.from_dict(doc["lifting"]),
                        n_state=int(doc["n_state"]))


def save_closed_loop(result, csv_path, json_path=None) -> None:
    """Trajectory CSV (t, x, u, nominal q, error, solve_time) + JSON summary.

    The solve_time column is wall clock and excluded from determinism
    guarantees; everything else is reproducible bit for bit under a fixed
    seed.
    """
    csv_path = str(csv_path)
    if json_path is None:
        json_path = os.path.splitext(csv_path)[0] + "_summary.json"
    traj = result.trajectory
    n = traj.n_state
    m = traj.inputs.shape[1] if traj.inputs.size else 0
    r = result.nominal_q.shape[1] if result.nominal_q.size else 0
    header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
              + [f"qhat{j + 1}" for j in range(r)] + [f"eq{j + 1}" for j in range(r)]
              + ["solve_time"])
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for k in range(traj.n_samples):
            row = [_fmt(traj.t[k])] + [_fmt(v) for v in traj.states[k]]
            if k < len(traj.inputs):
                row += [_fmt(v) for v in traj.inputs[k]]
                row += [_fmt(v) for v in result.nominal_q[k]]
                row += [_fmt(v) for v in result.errors_eq[k]]
                row += [_fmt(result.solve_times[k])]
            else:
                row += [""] * (m + 2 * r + 1)
            w.writerow(row)
    st = result.solve_times
    summary = {
        "controller": result.controller,
        "seed": result.seed,
        "aborted": result.aborted,
        "abort_reason": result.abort_reason,
        "saturation_count": result.saturation_count,
        "rmse_summary": result.rmse_summary,
        "solve_time_mean": float(np.mean(st)) if st.size else None,
        "solve_time_p95": float(np.percentile(st, 95)) if st.size else None,
        "qp_iterations_mean": float(np.mean(result.qp_iterations)) if st.size else None,
        "scale": None if result.scale is None else [float(v) for v in result.scale],
    }
    with open(json_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
