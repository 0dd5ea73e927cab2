"""End-to-end pipeline stages shared by the CLI and the test suite.

Each stage reads/writes plain CSV/JSON artifacts under a working directory:

    out/
      dataset/training.csv(.json)       open-loop excitation data
      ident/                            lifting, models, identification report
      control/<scenario>_<controller>_seed<k>/   closed-loop runs
      report/                           aggregated tables and figures

Seeds are derived from the experiment seed through numpy SeedSequence spawns,
so a rerun with the same configuration reproduces every artifact bit for bit
(wall-clock timing columns excepted).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import koopman, lifting, mpc, persist, plant
from .config import ExperimentConfig, load_scenario

__all__ = [
    "generate_data", "identify", "run_control", "sweep_orders",
    "spawned_seeds", "dataset_path", "ident_dir", "control_dir",
]


def spawned_seeds(seed: int) -> dict:
    """Named child seeds for the pipeline stages."""
    root = np.random.SeedSequence(seed)
    exc, dist, rbf = root.spawn(3)
    return {"excitation": exc, "disturbance": dist, "rbf": rbf}


def dataset_path(out_dir) -> str:
    return os.path.join(out_dir, "dataset", "training.csv")


def ident_dir(out_dir) -> str:
    return os.path.join(out_dir, "ident")


def control_dir(out_dir, scenario_name, controller, seed) -> str:
    return os.path.join(out_dir, "control",
                        f"{scenario_name}_{controller}_seed{seed}")


def generate_data(cfg: ExperimentConfig, out_dir) -> plant.TrajectoryDataset:
    """Open-loop excitation run; writes dataset CSV + JSON sidecar."""
    seeds = spawned_seeds(cfg.seed)
    d = cfg.data
    inputs = plant.generate_excitation((d.u_min, d.u_max), d.hold, d.horizon,
                                       cfg.dt, seeds["excitation"])
    dist = plant.generate_disturbance(d.disturbance, len(inputs), seeds["disturbance"])
    ds = plant.simulate_open_loop(np.asarray(d.x0), inputs, dist, cfg.plant,
                                  dt=cfg.dt, n_sub=d.n_sub, seed=cfg.seed,
                                  meta={"stage": "excitation", "hold": d.hold,
                                        "horizon": d.horizon})
    path = dataset_path(out_dir)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    ds.save(path)
    return ds


def _chronological_split(ds: plant.TrajectoryDataset, validation_fraction: float):
    n_val = int(round(validation_fraction * ds.n_samples))
    n_train = ds.n_samples - n_val
    train = plant.TrajectoryDataset(states=ds.states[:n_train],
                                    inputs=ds.inputs[:n_train - 1],
                                    t=ds.t[:n_train], dt=ds.dt, seed=ds.seed,
                                    meta={"split": "train"})
    val = plant.TrajectoryDataset(states=ds.states[n_train:],
                                  inputs=ds.inputs[n_train:],
                                  t=ds.t[n_train:], dt=ds.dt, seed=ds.seed,
                                  meta={"split": "validation"})
    return train, val


def identify(cfg: ExperimentConfig, out_dir, dataset=None) -> dict:
    """Score the library, select the lifting, fit both models, validate.

    Returns a dict with the lifting, both models, the scaler, and the report;
    everything is also persisted under ``out/ident``.
    """
    if dataset is None:
        dataset = plant.TrajectoryDataset.load(dataset_path(out_dir))
    train, val = _chronological_split(dataset, cfg.reduction.validation_fraction)

    scaler = lifting.StateScaler.from_data(train.states)
    seeds = spawned_seeds(cfg.seed)
    samples_norm = scaler.transform(train.states)
    lib = lifting.build_library(cfg.library, train.n_state,
                                samples_norm=samples_norm, seed=seeds["rbf"])
    est = lifting.run_kalman_gsindy(train, lib, cfg.kalman, scaler=scaler)
    lift_map = lifting.select_functions(est, cfg.kalman.lam, lib, scaler)

    model_full = koopman.fit_full(train, lift_map)
    model_reduced = koopman.fit_reduced(train, lift_map, cfg.reduction.r)

    scale = np.asarray(scaler.hi) - np.asarray(scaler.lo)
    val_rmse = {}
    val_pred = {}
    for name, model in (("full", model_full), ("reduced", model_reduced)):
        pred, _, diverged = koopman.predict_rollout(model, val.states[0], val.inputs)
        n_ok = int((~np.isnan(pred).any(axis=1)).sum())  # NaN rows are a suffix
        _, agg = koopman.prediction_rmse(pred[:n_ok], val.states[:n_ok], scale=scale)
        val_rmse[name] = agg
        val_pred[name] = pred
        val_rmse[f"{name}_diverged"] = bool(diverged)

    idir = ident_dir(out_dir)
    os.makedirs(idir, exist_ok=True)
    persist.save_lifting(lift_map, os.path.join(idir, "lifting.json"))
    persist.save_model(model_full, os.path.join(idir, "model_full.json"))
    persist.save_model(model_reduced, os.path.join(idir, "model_reduced.json"))

    report = {
        "seed": cfg.seed,
        "library_size": lib.size,
        "n_selected": len(lift_map.entries),
        "selected_names": [e.name for e in lift_map.entries],
        "selected_indices": list(lift_map.selected_indices),
        "lambda": cfg.kalman.lam,
        "lifted_dim": lift_map.dim,
        "r": cfg.reduction.r,
        "eigvals": [float(v) for v in model_reduced.basis.eigvals],
        "validation_rmse_full": val_rmse["full"],
        "validation_rmse_reduced": val_rmse["reduced"],
        "validation_diverged_full": val_rmse["full_diverged"],
        "validation_diverged_reduced": val_rmse["reduced_diverged"],
        "n_train_samples": train.n_samples,
        "n_validation_samples": val.n_samples,
    }
    with open(os.path.join(idir, "identification.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(idir, "scaling.json"), "w") as f:
        json.dump({"lo": list(scaler.lo), "hi": list(scaler.hi),
                   "rmse_scale": [float(v) for v in scale]}, f, indent=2, sort_keys=True)
        f.write("\n")

    # plot-ready series: eigenvalue spectrum and validation rollouts
    with open(os.path.join(idir, "eigvals.csv"), "w") as f:
        f.write("mode,eigenvalue\n")
        for i, v in enumerate(model_reduced.basis.eigvals):
            f.write(f"{i + 1},{v!r}\n")
    n = val.n_state
    for name in ("full", "reduced"):
        with open(os.path.join(idir, f"validation_pred_{name}.csv"), "w") as f:
            cols = (["t"] + [f"x{i + 1}" for i in range(n)]
                    + [f"xhat{i + 1}" for i in range(n)])
            f.write(",".join(cols) + "\n")
            P = val_pred[name]
            for k in range(len(P)):
                row = ([repr(float(val.t[k]))]
                       + [repr(float(v)) for v in val.states[k]]
                       + [repr(float(v)) for v in P[k]])
                f.write(",".join(row) + "\n")

    return {"lifting": lift_map, "model_full": model_full,
            "model_reduced": model_reduced, "scaler": scaler,
            "library": lib, "estimate": est, "report": report,
            "train": train, "validation": val, "scale": scale}


def _load_ident(out_dir):
    idir = ident_dir(out_dir)
    model_full = persist.load_model(os.path.join(idir, "model_full.json"))
    model_reduced = persist.load_model(os.path.join(idir, "model_reduced.json"))
    with open(os.path.join(idir, "scaling.json")) as f:
        scaling = json.load(f)
    return model_full, model_reduced, np.asarray(scaling["rmse_scale"], dtype=float)


def run_control(cfg: ExperimentConfig, out_dir, scenario_spec,
                controllers=("FullKMPC", "ReducedKMPC", "ReducedRKMPC"),
                n_seeds: int = 1, seed_offset: int = 0,
                models=None, rmse_scale=None, robust_gain_zero: bool = False) -> list:
    """Run closed-loop experiments; one run directory per (controller, seed).

    ``robust_gain_zero`` forces K_r = 0 in the robust controller, which must
    reproduce the nominal reduced controller exactly.
    """
    from .report import case_windows

    if models is None:
        model_full, model_reduced, scale = _load_ident(out_dir)
    else:
        model_full, model_reduced, scale = models
    if rmse_scale is not None:
        scale = np.asarray(rmse_scale, dtype=float)

    scenario, cal_report = load_scenario(scenario_spec, cfg.plant, dt=cfg.dt)
    u_min = scenario.u_min if scenario.u_min is not None else np.asarray(cfg.data.u_min)
    u_max = scenario.u_max if scenario.u_max is not None else np.asarray(cfg.data.u_max)
    windows = case_windows(scenario)

    results = []
    for controller in controllers:
        model = model_full if controller == "FullKMPC" else model_reduced
        mpc_cfg = cfg.mpc.config_for(model, controller, u_min, u_max, cfg.dt)
        gain = None
        if controller == "ReducedRKMPC":
            if robust_gain_zero:
                gain = mpc.RobustGain(
                    K_r=np.zeros((model.m, model.r)),
                    spectral_radius=float(np.abs(np.linalg.eigvals(model.A)).max()))
            else:
                gain = mpc.design_feedback_gain(model.A, model.B, mpc_cfg.Q,
                                                mpc_cfg.R,
                                                input_scale=mpc_cfg.input_scale)
        for i in range(n_seeds):
            seed = scenario.disturbance_seed + seed_offset + i
            result = mpc.run_closed_loop(cfg.plant, model, controller, scenario,
                                         mpc_cfg, gain=gain, rmse_scale=scale,
                                         seed=seed)
            result.rmse_summary = {
                case: mpc.scaled_rmse(result, win, scale=scale,
                                      setpoints=scenario.setpoints)
                for case, win in windows.items()
            }
            rdir = control_dir(out_dir, scenario.name, controller, seed)
            os.makedirs(rdir, exist_ok=True)
            persist.save_closed_loop(result, os.path.join(rdir, "trajectory.csv"))
            with open(os.path.join(rdir, "run.json"), "w") as f:
                json.dump({"controller": controller, "seed": seed,
                           "scenario": scenario.name,
                           "calibration": cal_report,
                           "windows": {k: list(v) for k, v in windows.items()},
                           "robust_gain_zero": robust_gain_zero,
                           "spectral_radius": (gain.spectral_radius
                                               if gain is not None else None)},
                          f, indent=2, sort_keys=True)
                f.write("\n")
            results.append(result)
    return results


def sweep_orders(cfg: ExperimentConfig, out_dir, r_values, dataset=None) -> list:
    """Fit the reduced model for each order; report spectra and validation RMSE."""
    if dataset is None:
        dataset = plant.TrajectoryDataset.load(dataset_path(out_dir))
    train, val = _chronological_split(dataset, cfg.reduction.validation_fraction)
    scaler = lifting.StateScaler.from_data(train.states)
    seeds = spawned_seeds(cfg.seed)
    lib = lifting.build_library(cfg.library, train.n_state,
                                samples_norm=scaler.transform(train.states),
                                seed=seeds["rbf"])
    est = lifting.run_kalman_gsindy(train, lib, cfg.kalman, scaler=scaler)
    lift_map = lifting.select_functions(est, cfg.kalman.lam, lib, scaler)
    scale = np.asarray(scaler.hi) - np.asarray(scaler.lo)

    rows = []
    for r in r_values:
        model = koopman.fit_reduced(train, lift_map, r)
        pred, _, diverged = koopman.predict_rollout(model, val.states[0], val.inputs)
        good = ~np.isnan(pred).any(axis=1)
        _, agg = koopman.prediction_rmse(pred[good], val.states[:good.sum()], scale=scale)
        Z, _ = koopman.lift_dataset(train, lift_map)
        recon = koopman.reconstruction_mse(model.basis, Z)
        rows.append({"r": int(r), "validation_rmse": float(agg),
                     "reconstruction_mse": float(recon), "diverged": bool(diverged)})
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep_r.csv")
    with open(path, "w") as f:
        f.write("r,validation_rmse,reconstruction_mse,diverged\n")
        for row in rows:
            f.write(f"{row['r']},{row['validation_rmse']!r},"
                    f"{row['reconstruction_mse']!r},{int(row['diverged'])}\n")
    return rows
