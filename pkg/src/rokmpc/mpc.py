"""Receding-horizon tracking control on the lifted linear model.

The predicted reduced states over the control horizon are eliminated through
the linear dynamics, leaving a dense strictly convex QP in the stacked input
sequence.  Decision variables are input deviations from the steady reference,
scaled by the half-range of the input box, so the published weighting
matrices act on O(1) quantities and the Hessian is well conditioned before
equilibration.

The robust variant adds a state-feedback correction on the one-step-ahead
prediction error e_k = q_k - q*_k (measured minus nominal), with the gain
synthesized from the infinite-horizon discrete Riccati recursion and
certified Schur stable.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from . import qp as qp_mod
from .koopman import KoopmanModel
from .plant import DisturbanceSpec, PlantParams, TrajectoryDataset
from .qp import QpProblem

__all__ = [
    "ControllerError",
    "MpcConfig",
    "SetPoint",
    "RobustGain",
    "Scenario",
    "ClosedLoopResult",
    "build_condensed_qp",
    "mpc_step",
    "design_feedback_gain",
    "robust_action",
    "run_closed_loop",
    "scaled_rmse",
    "CONTROLLER_KINDS",
]

CONTROLLER_KINDS = ("FullKMPC", "ReducedKMPC", "ReducedRKMPC")

# published input box, kJ/h
U_MIN_DEFAULT = (2.85e6, 0.98e6, 2.85e6)
U_MAX_DEFAULT = (2.976e6, 1.026e6, 2.976e6)


class ControllerError(RuntimeError):
    """Controller-level failure (infeasible QP, divergent condensing)."""

    def __init__(self, message, partial_result=None):
        super().__init__(message)
        self.partial_result = partial_result


@dataclass
class MpcConfig:
    """Horizon, weights, and constraint box of one controller instance."""

    N_c: int = 15
    Q: np.ndarray = None           # (r, r) PD state weight
    R: np.ndarray = None           # (m, m) PD input weight
    u_min: np.ndarray = None
    u_max: np.ndarray = None
    state_lo: np.ndarray = None    # optional reconstructed-state box
    state_hi: np.ndarray = None
    dt: float = 0.025
    qp_tol: float = 1e-6
    qp_max_iter: int = 4000

    def __post_init__(self):
        if self.N_c < 1:
            raise ValueError("control horizon must be at least 1")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.u_min = (np.asarray(U_MIN_DEFAULT, dtype=float) if self.u_min is None
                      else np.asarray(self.u_min, dtype=float).reshape(-1))
        self.u_max = (np.asarray(U_MAX_DEFAULT, dtype=float) if self.u_max is None
                      else np.asarray(self.u_max, dtype=float).reshape(-1))
        for W, name in ((self.Q, "Q"), (self.R, "R")):
            if not np.allclose(W, W.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(W).min() <= 0:
                raise ValueError(f"{name} must be positive definite")

    @property
    def input_scale(self) -> np.ndarray:
        """Half-range of the input box; unit scale where a side is infinite."""
        s = 0.5 * (self.u_max - self.u_min)
        return np.where(np.isfinite(s) & (s > 0), s, 1.0)


@dataclass
class SetPoint:
    """Tracking target: state set-point, steady input, activation time."""

    x_s: np.ndarray
    u_s: np.ndarray
    activation_time: float = 0.0

    def __post_init__(self):
        self.x_s = np.asarray(self.x_s, dtype=float).reshape(-1)
        self.u_s = np.asarray(self.u_s, dtype=float).reshape(-1)

    def q_s(self, model: KoopmanModel) -> np.ndarray:
        """Reduced coordinates of the set-point under the given model."""
        return model.setpoint_projection(self.x_s)


@dataclass
class RobustGain:
    """Correction feedback K_r with its certified closed-matrix spectral radius."""

    K_r: np.ndarray
    spectral_radius: float


def design_feedback_gain(A, B, Q, R, input_scale=None,
                         tol: float = 1e-10, max_iter: int = 100000) -> RobustGain:
    """Infinite-horizon discrete LQR gain via Riccati fixed-point iteration.

    ``input_scale`` applies the same input scaling used by the condensed QP so
    the weights act on comparable magnitudes; the returned gain maps the
    reduced-state error to raw input units.  Raises if the recursion fails to
    converge or the closed matrix is not Schur stable.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    s = np.ones(B.shape[1]) if input_scale is None else np.asarray(input_scale, dtype=float)
    Bs = B * s[None, :]

    P = Q.copy()
    for _ in range(max_iter):
        BtP = Bs.T @ P
        gain_core = np.linalg.solve(R + BtP @ Bs, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ Bs @ gain_core
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.abs(P_next - P).max() / max(np.abs(P_next).max(), 1.0)
        P = P_next
        if delta < tol:
            break
    else:
        raise ControllerError("Riccati recursion did not converge; the "
                              "identified model may be poorly conditioned")
    K_scaled = -np.linalg.solve(R + Bs.T @ P @ Bs, Bs.T @ P @ A)
    K_r = s[:, None] * K_scaled
    rho = float(np.abs(np.linalg.eigvals(A + B @ K_r)).max())
    if rho >= 1.0:
        raise ControllerError(f"closed matrix not Schur stable (rho={rho:.6f}); "
                              "check the identified model")
    return RobustGain(K_r=K_r, spectral_radius=rho)


def _condensing_blocks(A, B_scaled, d_aff, N_c):
    """Prediction matrices for the stacked states i = 1..N_c.

    Returns (Lam, Gam, w) with  X = Lam q0 + Gam Z + w,  X stacking q_1..q_Nc
    and Z stacking the scaled input deviations.
    """
    r, m = B_scaled.shape
    Apow = np.empty((N_c, r, r))
    Apow[0] = A
    for i in range(1, N_c):
        Apow[i] = A @ Apow[i - 1]
    M = np.empty((N_c, r, m))
    M[0] = B_scaled
    for j in range(1, N_c):
        M[j] = A @ M[j - 1]
    Lam = Apow.reshape(N_c * r, r)
    Gam4 = np.zeros((N_c, r, N_c, m))
    ii, jj = np.tril_indices(N_c)
    Gam4[ii, :, jj, :] = M[ii - jj]
    Gam = Gam4.reshape(N_c * r, N_c * m)
    w = np.empty((N_c, r))
    acc = d_aff.copy()
    w[0] = acc
    for i in range(1, N_c):
        acc = A @ acc + d_aff
        w[i] = acc
    return Lam, Gam, w.reshape(N_c * r)


def build_condensed_qp(model: KoopmanModel, q_current, sp: SetPoint,
                       cfg: MpcConfig) -> QpProblem:
    """Eliminate predicted states, returning a dense QP in scaled input deviations.

    The cost penalizes the predicted reduced states q_1..q_Nc and the inputs
    u_0..u_{Nc-1} around the set-point pair; optional box constraints on the
    reconstructed physical state become stacked affine rows.
    """
    A, B = model.A, model.B
    r, m = B.shape
    N_c = cfg.N_c
    if cfg.Q.shape != (r, r):
        raise ValueError(f"state weight must be {r}x{r} for this model, "
                         f"got {cfg.Q.shape}")
    if cfg.R.shape != (m, m):
        raise ValueError(f"input weight must be {m}x{m}, got {cfg.R.shape}")
    q0 = np.asarray(q_current, dtype=float).reshape(-1)
    q_s = sp.q_s(model)
    s = cfg.input_scale
    B_scaled = B * s[None, :]
    d_aff = B @ sp.u_s

    Lam, Gam, w = _condensing_blocks(A, B_scaled, d_aff, N_c)
    if not (np.all(np.isfinite(Gam)) and np.all(np.isfinite(Lam)) and np.all(np.isfinite(w))):
        raise ControllerError("non-finite condensing blocks; the prediction "
                              "matrix is unstable over the horizon")

    # R acts on the scaled deviations directly: the published weight
    # magnitudes are meaningful only for O(1) input coordinates
    Qbar = np.kron(np.eye(N_c), cfg.Q)
    Rbar = np.kron(np.eye(N_c), cfg.R)

    drift = Lam @ q0 + w - np.tile(q_s, N_c)
    H = 2.0 * (Gam.T @ Qbar @ Gam + Rbar)
    H = 0.5 * (H + H.T)
    g = 2.0 * (Gam.T @ (Qbar @ drift))

    lb = np.tile((cfg.u_min - sp.u_s) / s, N_c)
    ub = np.tile((cfg.u_max - sp.u_s) / s, N_c)

    G = h = None
    if cfg.state_lo is not None or cfg.state_hi is not None:
        n = model.n_state
        Dmat = model.basis.phi_r.T[:n, :]
        c0 = (model.basis.z_bar - model.basis.phi_r.T @ model.basis.q_bar)[:n]
        Dbar = np.kron(np.eye(N_c), Dmat)
        x_pred_aff = Dbar @ (Lam @ q0 + w) + np.tile(c0, N_c)
        DG = Dbar @ Gam
        rows, rhs = [], []
        if cfg.state_hi is not None:
            hi = np.asarray(cfg.state_hi, dtype=float).reshape(-1)
            rows.append(DG)
            rhs.append(np.tile(hi, N_c) - x_pred_aff)
        if cfg.state_lo is not None:
            lo = np.asarray(cfg.state_lo, dtype=float).reshape(-1)
            rows.append(-DG)
            rhs.append(x_pred_aff - np.tile(lo, N_c))
        G = np.vstack(rows)
        h = np.concatenate(rhs)

    return QpProblem(H=H, g=g, lb=lb, ub=ub, G=G, h=h)


@dataclass
class MpcStepResult:
    u_sequence: np.ndarray       # (N_c, m), raw input units
    q_next_pred: np.ndarray      # nominal one-step prediction q*_{k+1}
    qp_solution: qp_mod.QpSolution
    condense_solve_time: float   # wall time of condensing + QP solve only


def mpc_step(model: KoopmanModel, x_k, sp: SetPoint, cfg: MpcConfig,
             warm=None, qp_dump_path=None, q_nominal=None) -> MpcStepResult:
    """One receding-horizon step from a measured plant state.

    The optimization is always anchored at the measured projection.  The
    returned one-step prediction advances ``q_nominal`` when given (the
    self-propagating reference model whose mismatch drives the robust
    correction), else the measured projection.  The solver must report
    Optimal, or MaxIter with a small residual; an infeasible QP raises
    (optionally dumping the problem for offline inspection).
    """
    q0 = model.lift_project(np.asarray(x_k, dtype=float))
    t0 = time.perf_counter()
    problem = build_condensed_qp(model, q0, sp, cfg)
    sol = qp_mod.solve(problem, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter,
                       warm_active=warm.active_set if warm is not None else None)
    elapsed = time.perf_counter() - t0
    if sol.status == "Infeasible" or (sol.status == "MaxIter"
                                      and sol.kkt_residual > 10.0 * cfg.qp_tol):
        if qp_dump_path is not None:
            problem.dump_txt(qp_dump_path)
            raise ControllerError(f"QP solve failed ({sol.status}, "
                                  f"kkt={sol.kkt_residual:.2e}); dumped to {qp_dump_path}")
        raise ControllerError(f"QP solve failed ({sol.status}, kkt={sol.kkt_residual:.2e})")
    s = cfg.input_scale
    zeta = sol.z.reshape(cfg.N_c, len(s))
    u_seq = sp.u_s + zeta * s
    q_anchor = q0 if q_nominal is None else np.asarray(q_nominal, dtype=float)
    q_next = model.A @ q_anchor + model.B @ u_seq[0]
    return MpcStepResult(u_sequence=u_seq, q_next_pred=q_next,
                         qp_solution=sol, condense_solve_time=elapsed)


def robust_action(u_hat_star, e_kq, gain: RobustGain, bounds) -> np.ndarray:
    """Corrected input u = u* + K_r e, clipped elementwise to the input box."""
    u = np.asarray(u_hat_star, dtype=float) + gain.K_r @ np.asarray(e_kq, dtype=float)
    return np.clip(u, bounds[0], bounds[1])


@dataclass
class Scenario:
    """Closed-loop experiment description."""

    x0: np.ndarray
    setpoints: list                      # SetPoint list, ordered by activation_time
    horizon: float                       # hours
    dt: float = 0.025
    disturbance: DisturbanceSpec = field(default_factory=lambda: DisturbanceSpec(scale=0.0))
    disturbance_seed: int = 0
    u_min: np.ndarray = None
    u_max: np.ndarray = None
    n_sub: int = 10
    name: str = "scenario"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if not self.setpoints:
            raise ValueError("scenario needs at least one set-point")
        self.setpoints = sorted(self.setpoints, key=lambda s: s.activation_time)

    def active_index(self, t: float) -> int:
        active = 0
        for i, sp in enumerate(self.setpoints):
            if sp.activation_time <= t + 1e-12:
                active = i
        return active

    def active_setpoint(self, t: float) -> SetPoint:
        return self.setpoints[self.active_index(t)]


@dataclass
class ClosedLoopResult:
    """Everything logged from one closed-loop run."""

    trajectory: TrajectoryDataset
    controller: str
    nominal_q: np.ndarray         # (K, r) nominal predictions q*_{k+1}
    errors_eq: np.ndarray         # (K, r) e_k = q_k - q*_k
    solve_times: np.ndarray       # (K,) condensing + QP wall time per step
    qp_iterations: np.ndarray
    setpoint_index: np.ndarray    # (K,) which set-point was active
    saturation_count: int
    seed: object = None
    aborted: bool = False
    abort_reason: str = ""
    rmse_summary: dict = field(default_factory=dict)
    scale: np.ndarray = None      # per-state scaling used for RMSE reporting

    @property
    def applied_u(self) -> np.ndarray:
        return self.trajectory.inputs


def run_closed_loop(params: PlantParams, model: KoopmanModel, controller_kind: str,
                    scenario: Scenario, cfg: MpcConfig, gain: RobustGain = None,
                    rmse_scale=None, seed=None) -> ClosedLoopResult:
    """Simulate plant + controller over the scenario horizon.

    ``controller_kind`` selects nominal (FullKMPC / ReducedKMPC, depending on
    the model passed in) or robust (ReducedRKMPC) input computation.  A
    controller failure aborts the run but preserves the partial log in the
    raised :class:`ControllerError`.
    """
    if controller_kind not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller kind {controller_kind!r}")
    robust = controller_kind == "ReducedRKMPC"
    if robust and gain is None:
        raise ValueError("robust controller requires a feedback gain")
    if gain is not None and gain.spectral_radius >= 1.0:
        raise ControllerError("refusing to run: feedback gain is not Schur stable")

    n_steps = int(round(scenario.horizon / scenario.dt))
    dist_seed = seed if seed is not None else scenario.disturbance_seed
    if scenario.disturbance.scale != 0.0:
        w_seq = plant_mod.generate_disturbance(scenario.disturbance, n_steps, dist_seed)
    else:
        w_seq = None

    bounds = (cfg.u_min, cfg.u_max)
    states = np.empty((n_steps + 1, len(scenario.x0)))
    states[0] = scenario.x0
    inputs = np.empty((n_steps, model.m))
    nominal_q = np.empty((n_steps, model.r))
    errors = np.empty((n_steps, model.r))
    solve_times = np.empty(n_steps)
    qp_iters = np.empty(n_steps, dtype=int)
    sp_index = np.empty(n_steps, dtype=int)
    saturations = 0
    q_pred_prev = None   # nominal prediction q*_k made at step k-1
    warm = None
    aborted = False
    abort_reason = ""
    k_done = 0

    for k in range(n_steps):
        t = k * scenario.dt
        i_sp = scenario.active_index(t)
        sp = scenario.setpoints[i_sp]
        sp_index[k] = i_sp
        x_k = states[k]
        q_k = model.lift_project(x_k)
        e_k = q_k - q_pred_prev if q_pred_prev is not None else np.zeros(model.r)
        try:
            step = mpc_step(model, x_k, sp, cfg, warm=warm)
        except ControllerError as err:
            aborted = True
            abort_reason = f"step {k}: {err}"
            break
        warm = step.qp_solution
        u_star = step.u_sequence[0]
        if robust:
            u_apply = robust_action(u_star, e_k, gain, bounds)
        else:
            u_apply = np.clip(u_star, bounds[0], bounds[1])
        if np.any(u_apply <= cfg.u_min + 1e-9) or np.any(u_apply >= cfg.u_max - 1e-9):
            saturations += 1

        w_k = w_seq[k] if w_seq is not None else None
        states[k + 1] = plant_mod.step_rk4(x_k, u_apply, w_k, scenario.dt,
                                           params, n_sub=scenario.n_sub)
        states[k + 1], _ = plant_mod._clamp_fractions(states[k + 1])

        inputs[k] = u_apply
        nominal_q[k] = step.q_next_pred
        errors[k] = e_k
        solve_times[k] = step.condense_solve_time
        qp_iters[k] = step.qp_solution.iterations
        q_pred_prev = step.q_next_pred
        k_done = k + 1

    K = k_done
    traj = TrajectoryDataset(states=states[:K + 1], inputs=inputs[:K],
                             t=np.arange(K + 1) * scenario.dt, dt=scenario.dt,
                             seed=dist_seed,
                             meta={"scenario": scenario.name,
                                   "controller": controller_kind})
    result = ClosedLoopResult(
        trajectory=traj,
        controller=controller_kind,
        nominal_q=nominal_q[:K],
        errors_eq=errors[:K],
        solve_times=solve_times[:K],
        qp_iterations=qp_iters[:K],
        setpoint_index=sp_index[:K],
        saturation_count=saturations,
        seed=dist_seed,
        aborted=aborted,
        abort_reason=abort_reason,
        scale=None if rmse_scale is None else np.asarray(rmse_scale, dtype=float),
    )
    if aborted:
        raise ControllerError(abort_reason, partial_result=result)
    return result


def scaled_rmse(result: ClosedLoopResult, window, scale=None,
                setpoints=None) -> float:
    """Tracking RMSE over a time window on per-coordinate scaled states.

    RMSE = sqrt( 1/(n K) * sum_k || (x_s(k) - x_k) / scale ||^2 ) over samples
    whose time lies in [window[0], window[1]).  The active set-point at each
    sample defines x_s(k).
    """
    t0, t1 = window
    traj = result.trajectory
    n = traj.n_state
    scale = (result.scale if scale is None else np.asarray(scale, dtype=float))
    if scale is None:
        scale = np.ones(n)
    if setpoints is None:
        raise ValueError("scaled_rmse needs the scenario set-point schedule")
    mask = (traj.t[:-1] >= t0 - 1e-12) & (traj.t[:-1] < t1 - 1e-12)
    idx = np.where(mask)[0]
    if idx.size == 0:
        raise ValueError(f"empty evaluation window [{t0}, {t1})")
    total = 0.0
    for k in idx:
        t = traj.t[k]
        sp = _active_sp(setpoints, t)
        err = (sp.x_s - traj.states[k]) / scale
        total += float(err @ err)
    return float(np.sqrt(total / (n * idx.size)))


def _active_sp(setpoints, t):
    active = setpoints[0]
    for sp in sorted(setpoints, key=lambda s: s.activation_time):
        if sp.activation_time <= t + 1e-12:
            active = sp
    return active
