"""Experiment configuration: one YAML format across all pipeline stages.

Every stage (data generation, identification, control, reporting) reads the
same experiment file; scenario files describe closed-loop runs.  Defaults are
packaged under ``rokmpc/defaults`` and any field can be overridden by a user
file.  All run artifacts record the seed they were produced with.
"""

from __future__ import annotations

import copy
import importlib.resources
from dataclasses import dataclass, field

import numpy as np
import yaml

from .lifting import KalmanGsindyConfig, LibraryConfig
from .mpc import MpcConfig, Scenario, SetPoint
from .plant import DisturbanceSpec, PlantParams, calibrate_setpoint

__all__ = [
    "ExperimentConfig",
    "load_experiment",
    "load_plant_params",
    "load_scenario",
    "default_path",
]


def default_path(name: str):
    """Path to a packaged default file (context-managed by importlib)."""
    return importlib.resources.files("rokmpc.defaults").joinpath(name)


def _read_yaml(path) -> dict:
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _deep_update(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class DataConfig:
    horizon: float = 40.0
    hold: float = 1.5
    u_min: tuple = (2.85e6, 0.98e6, 2.85e6)
    u_max: tuple = (2.976e6, 1.026e6, 2.976e6)
    n_sub: int = 10
    x0: tuple = (0.1155, 0.6235, 497.3, 0.1367, 0.6053, 489.8, 0.0396, 0.5504, 491.8)
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)


@dataclass
class ReductionConfig:
    r: int = 8
    validation_fraction: float = 0.2


@dataclass
class MpcSettings:
    N_c: int = 15
    q_weights_full: tuple = ()
    q_weights_reduced: tuple = ()
    r_weights: tuple = (2.8, 3.3, 2.6)
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000

    def config_for(self, model, kind: str, u_min, u_max, dt: float) -> MpcConfig:
        """Instantiate an MpcConfig sized for the given model."""
        weights = (self.q_weights_full if kind == "FullKMPC"
                   else self.q_weights_reduced)
        r = model.r
        if len(weights) != r:
            raise ValueError(
                f"{kind}: state weight vector has {len(weights)} entries but the "
                f"model order is {r}; adjust 'q_weights_*' or the selection "
                f"threshold so the dimensions agree")
        return MpcConfig(N_c=self.N_c, Q=np.diag(weights), R=np.diag(self.r_weights),
                         u_min=np.asarray(u_min, dtype=float),
                         u_max=np.asarray(u_max, dtype=float),
                         dt=dt, qp_tol=self.qp_tol, qp_max_iter=self.qp_max_iter)


@dataclass
class ExperimentConfig:
    seed: int = 20240801
    dt: float = 0.025
    plant: PlantParams = field(default_factory=PlantParams)
    data: DataConfig = field(default_factory=DataConfig)
    library: LibraryConfig = field(default_factory=LibraryConfig)
    kalman: KalmanGsindyConfig = field(default_factory=KalmanGsindyConfig)
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    mpc: MpcSettings = field(default_factory=MpcSettings)
    raw: dict = field(default_factory=dict)

    def effective_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=None)


def load_plant_params(spec) -> PlantParams:
    """'default', a mapping, or a YAML file path."""
    if spec in (None, "default"):
        with importlib.resources.as_file(default_path("plant_params.yaml")) as p:
            data = _read_yaml(p)
        return PlantParams.from_mapping(data)
    if isinstance(spec, dict):
        return PlantParams.from_mapping(spec)
    return PlantParams.from_mapping(_read_yaml(spec))


def load_experiment(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load the experiment config; user file and overrides layer on defaults."""
    with importlib.resources.as_file(default_path("experiment.yaml")) as p:
        doc = _read_yaml(p)
    if path is not None:
        doc = _deep_update(doc, _read_yaml(path))
    if overrides:
        doc = _deep_update(doc, overrides)

    data_doc = dict(doc.get("data", {}))
    dist = DisturbanceSpec(**data_doc.pop("disturbance", {}))
    cfg = ExperimentConfig(
        seed=int(doc.get("seed", 20240801)),
        dt=float(doc.get("dt", 0.025)),
        plant=load_plant_params(doc.get("plant_params", "default")),
        data=DataConfig(disturbance=dist, **{k: tuple(v) if isinstance(v, list) else v
                                             for k, v in data_doc.items()}),
        library=LibraryConfig.from_dict(doc.get("library", {})),
        kalman=KalmanGsindyConfig(
            q_proc=float(doc.get("kalman", {}).get("q_proc", 1e-6)),
            r_meas=float(doc.get("kalman", {}).get("r_meas", 1e-2)),
            p0=float(doc.get("kalman", {}).get("p0", 100.0)),
            lam=float(doc.get("kalman", {}).get("lambda", 0.1)),
        ),
        reduction=ReductionConfig(**doc.get("reduction", {})),
        mpc=MpcSettings(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in doc.get("mpc", {}).items()}),
        raw=doc,
    )
    return cfg


def load_scenario(spec, params: PlantParams, dt: float = 0.025,
                  calibrate: bool | None = None):
    """Load a scenario by packaged name ('single', 'change') or file path.

    When calibration is on (scenario default: true), each set-point is
    re-anchored to the nearest exact equilibrium of the given plant
    parameters.  Returns (Scenario, calibration report dict).
    """
    if spec in ("single", "change"):
        with importlib.resources.as_file(
                default_path(f"scenario_{spec}.yaml")) as p:
            doc = _read_yaml(p)
    else:
        doc = _read_yaml(spec)

    do_cal = doc.get("calibrate", True) if calibrate is None else calibrate
    report = {"calibrated": bool(do_cal), "setpoints": []}
    setpoints = []
    for sp_doc in doc["setpoints"]:
        x_ref = np.asarray(sp_doc["x_s"], dtype=float)
        u_ref = np.asarray(sp_doc["u_s"], dtype=float)
        t_act = float(sp_doc.get("activation_time", 0.0))
        if do_cal:
            cal = calibrate_setpoint(params, x_ref, u_ref)
            setpoints.append(SetPoint(x_s=cal.x, u_s=cal.u, activation_time=t_act))
            report["setpoints"].append({
                "x_ref": x_ref.tolist(), "u_ref": u_ref.tolist(),
                "x_star": cal.x.tolist(), "u_star": cal.u.tolist(),
                "max_rel_dev_x": cal.max_rel_dev_x,
                "max_rel_dev_u": cal.max_rel_dev_u,
                "residual": cal.residual,
                "residual_at_ref": cal.residual_at_ref,
                "stable": cal.stable, "max_re_eig": cal.max_re_eig,
            })
        else:
            setpoints.append(SetPoint(x_s=x_ref, u_s=u_ref, activation_time=t_act))

    dist_doc = dict(doc.get("disturbance", {}))
    dist_seed = int(dist_doc.pop("seed", 0))
    scenario = Scenario(
        x0=np.asarray(doc["x0"], dtype=float),
        setpoints=setpoints,
        horizon=float(doc["horizon"]),
        dt=float(doc.get("dt", dt)),
        disturbance=DisturbanceSpec(**dist_doc),
        disturbance_seed=dist_seed,
        u_min=None if "u_min" not in doc else np.asarray(doc["u_min"], dtype=float),
        u_max=None if "u_max" not in doc else np.asarray(doc["u_max"], dtype=float),
        n_sub=int(doc.get("n_sub", 10)),
        name=str(doc.get("name", "scenario")),
    )
    return scenario, report
