"""Lifted linear model identification: POD basis and least-squares operator fits.

Snapshots of the lifted state z = Psi(x) are projected onto the leading
eigenvectors of their sample covariance (computed via SVD of the mean-removed
snapshot matrix), and the reduced dynamics

    q_{k+1} = A q_k + B u_k,      q = Phi_r z,
    x_hat   = C (Phi_r^T (q - q_bar) + z_bar),   C = [I_n, 0]

are fitted by batch least squares on consecutive snapshot pairs.  The
full-order variant is the special case Phi_r = I.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .lifting import LiftingMap

__all__ = [
    "PodBasis",
    "KoopmanModel",
    "lift_dataset",
    "pod_basis",
    "fit_reduced",
    "fit_full",
    "predict_rollout",
    "prediction_rmse",
]

RANK_TOL = 1e-10


@dataclass
class PodBasis:
    """Orthonormal projection onto the leading covariance eigenvectors.

    ``phi_r`` has shape (r, N) with orthonormal rows; ``eigvals`` are all N
    eigenvalues of the sample covariance (1/(K-1) normalization), sorted
    descending.
    """

    phi_r: np.ndarray
    z_bar: np.ndarray
    eigvals: np.ndarray

    def __post_init__(self):
        self.phi_r = np.atleast_2d(np.asarray(self.phi_r, dtype=float))
        self.z_bar = np.asarray(self.z_bar, dtype=float).reshape(-1)
        self.eigvals = np.asarray(self.eigvals, dtype=float).reshape(-1)

    @property
    def r(self) -> int:
        return self.phi_r.shape[0]

    @property
    def N(self) -> int:
        return self.phi_r.shape[1]

    @property
    def q_bar(self) -> np.ndarray:
        return self.phi_r @ self.z_bar

    def project(self, z) -> np.ndarray:
        """q = Phi_r z (columns or single vectors)."""
        return self.phi_r @ np.asarray(z, dtype=float)

    def reconstruct(self, q) -> np.ndarray:
        """z_hat = Phi_r^T (q - q_bar) + z_bar for a single reduced vector."""
        q = np.asarray(q, dtype=float)
        return self.phi_r.T @ (q - self.q_bar) + self.z_bar

    @classmethod
    def identity(cls, N: int, z_bar=None, eigvals=None) -> "PodBasis":
        return cls(phi_r=np.eye(N),
                   z_bar=np.zeros(N) if z_bar is None else z_bar,
                   eigvals=np.zeros(N) if eigvals is None else eigvals)


def lift_dataset(dataset, lifting: LiftingMap):
    """Lifted snapshot matrix Z (N x K) and the column-mean z_bar.

    Raises with the offending sample index if the lifting's domain guard
    trips anywhere in the dataset.
    """
    states = np.atleast_2d(np.asarray(dataset.states, dtype=float))
    try:
        Z = lifting.evaluate_many(states).T
    except Exception:
        # slow path to localize the failure
        for k, x in enumerate(states):
            try:
                lifting.evaluate(x)
            except Exception as err:
                raise type(err)(f"lifting failed at sample {k}: {err}") from err
        raise
    return Z, Z.mean(axis=1)


def pod_basis(Z, r: int) -> PodBasis:
    """POD of a lifted snapshot matrix Z (N x K) via SVD of the centered data."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    N, K = Z.shape
    if not (1 <= r <= min(N, K)):
        raise ValueError(f"require 1 <= r <= min(N, K) = {min(N, K)}, got r={r}")
    z_bar = Z.mean(axis=1)
    Zc = Z - z_bar[:, None]
    U, s, _ = np.linalg.svd(Zc, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * (s[0] if s.size else 0.0)))
    if r > rank:
        warnings.warn(f"requested order r={r} exceeds the numerical rank {rank}; "
                      "basis padded with the remaining singular vectors")
    eigvals = np.zeros(N)
    m = min(N, K)
    eigvals[:m] = s ** 2 / max(K - 1, 1)
    return PodBasis(phi_r=U[:, :r].T, z_bar=z_bar, eigvals=eigvals)


def reconstruction_mse(basis: PodBasis, Z) -> float:
    """Mean squared reconstruction error of centered snapshots under the basis.

    For an exact POD basis this equals (K-1)/K times the tail eigenvalue sum.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Zc = Z - basis.z_bar[:, None]
    E = Zc - basis.phi_r.T @ (basis.phi_r @ Zc)
    return float(np.sum(E * E) / Z.shape[1])


@dataclass
class KoopmanModel:
    """Linear lifted model; the full-order case carries an identity basis.

    ``A`` is (r, r), ``B`` is (r, m); ``C = [I_n, 0]`` is implicit via
    ``n_state``.  Reconstruction always goes through the basis, which for the
    full-order model is the identity.
    """

    A: np.ndarray
    B: np.ndarray
    basis: PodBasis
    lifting: LiftingMap
    n_state: int

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        r = self.basis.r
        if self.A.shape != (r, r) or self.B.shape[0] != r:
            raise ValueError("model matrices inconsistent with the basis order")
        if self.n_state > self.basis.N:
            raise ValueError("state dimension exceeds the lifted dimension")

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def N(self) -> int:
        return self.basis.N

    def lift_project(self, x) -> np.ndarray:
        """q = Phi_r Psi(x) for a single raw state."""
        return self.basis.project(self.lifting.evaluate(x))

    def reconstruct_state(self, q) -> np.ndarray:
        """x_hat = C (Phi_r^T (q - q_bar) + z_bar)."""
        return self.basis.reconstruct(q)[:self.n_state]

    def setpoint_projection(self, x_s) -> np.ndarray:
        """Reduced coordinates of a set-point state."""
        return self.lift_project(x_s)


def _fit_from_snapshots(Z: np.ndarray, U_in: np.ndarray, projector: np.ndarray):
    """Least-squares [A, B] for q+ = A q + B u with q = projector @ z."""
    K = Z.shape[1]
    r = projector.shape[0]
    m = U_in.shape[1] if U_in.size else 0
    if K < r + m + 1:
        raise ValueError(f"need at least r + m + 1 = {r + m + 1} snapshots, got {K}")
    Q = projector @ Z
    regress = np.vstack([Q[:, :-1], U_in.T])        # (r+m, K-1)
    target = Q[:, 1:]                               # (r, K-1)
    sol, _, rank, _ = np.linalg.lstsq(regress.T, target.T, rcond=None)
    if rank < r + m:
        warnings.warn(f"rank-deficient regressor (rank {rank} < {r + m}); "
                      "returning the minimum-norm least-squares solution")
    AB = sol.T
    return AB[:, :r], AB[:, r:]


def fit_reduced(dataset, lifting: LiftingMap, r: int) -> KoopmanModel:
    """Fit the order-r model: POD basis from the data, then operator regression."""
    Z, _ = lift_dataset(dataset, lifting)
    basis = pod_basis(Z, r)
    U_in = np.atleast_2d(np.asarray(dataset.inputs, dtype=float))
    A, B = _fit_from_snapshots(Z, U_in, basis.phi_r)
    return KoopmanModel(A=A, B=B, basis=basis, lifting=lifting,
                        n_state=np.atleast_2d(dataset.states).shape[1])


def fit_full(dataset, lifting: LiftingMap) -> KoopmanModel:
    """Fit the full-order lifted model (no projection)."""
    Z, z_bar = lift_dataset(dataset, lifting)
    N = Z.shape[0]
    s = np.linalg.svd(Z - z_bar[:, None], compute_uv=False)
    eigvals = np.zeros(N)
    eigvals[:min(Z.shape)] = s ** 2 / max(Z.shape[1] - 1, 1)
    basis = PodBasis.identity(N, z_bar=z_bar, eigvals=eigvals)
    U_in = np.atleast_2d(np.asarray(dataset.inputs, dtype=float))
    A, B = _fit_from_snapshots(Z, U_in, np.eye(N))
    return KoopmanModel(A=A, B=B, basis=basis, lifting=lifting,
                        n_state=np.atleast_2d(dataset.states).shape[1])


def predict_rollout(model: KoopmanModel, x0, inputs, q_bound: float = 1e9):
    """Open-loop rollout from a raw initial state; never re-lifts predictions.

    Returns (predicted states (K+1, n), reduced trajectory (K+1, r),
    diverged flag).  The rollout truncates with ``diverged=True`` if the
    reduced state norm exceeds ``q_bound``.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float)) if np.size(inputs) else np.zeros((0, model.m))
    K = len(inputs)
    q = model.lift_project(np.asarray(x0, dtype=float))
    qs = np.full((K + 1, model.r), np.nan)
    xs = np.full((K + 1, model.n_state), np.nan)
    qs[0] = q
    xs[0] = model.reconstruct_state(q)
    diverged = False
    for k in range(K):
        q = model.A @ q + model.B @ inputs[k]
        if not np.all(np.isfinite(q)) or np.linalg.norm(q) > q_bound:
            diverged = True
            break
        qs[k + 1] = q
        xs[k + 1] = model.reconstruct_state(q)
    return xs, qs, diverged


def prediction_rmse(predicted, actual, scale=None):
    """Per-state and aggregate RMSE on scaled values.

    ``scale`` divides each state coordinate before squaring (default all
    ones).  The aggregate is sqrt(1/(n K) * sum_k ||e_k||^2), matching the
    scaled tracking metric used for the closed-loop tables.
    """
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    actual = np.atleast_2d(np.asarray(actual, dtype=float))
    if predicted.shape != actual.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {actual.shape}")
    n = predicted.shape[1]
    scale = np.ones(n) if scale is None else np.asarray(scale, dtype=float).reshape(-1)
    err = (predicted - actual) / scale
    per_state = np.sqrt(np.mean(err ** 2, axis=0))
    aggregate = float(np.sqrt(np.sum(err ** 2) / (err.size)))
    return per_state, aggregate
