"""Dense strictly convex quadratic programming with KKT-certified solutions.

Solves
    min  1/2 z' H z + g' z
    s.t. lb <= z <= ub,   G z <= h

by a dual active-set iteration (Goldfarb-Idnani flavor): start at the
unconstrained minimum, repeatedly add the most violated constraint while
keeping working-set multipliers nonnegative, dropping blocking constraints
along the way.  Each accepted step increases the objective, the iteration
count is finite for strictly convex problems, and the returned point carries
an explicit KKT residual (stationarity, primal feasibility, complementarity)
evaluated on the Ruiz-equilibrated problem.

Warm starting seeds the working set from a previous solution's active set,
which is the receding-horizon use case.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["QpError", "QpProblem", "QpSolution", "solve", "warm_start"]


class QpError(RuntimeError):
    """Raised for malformed problems (non-PD Hessian, inconsistent bounds)."""


@dataclass
class QpProblem:
    """Box- and polytope-constrained strictly convex QP data."""

    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray = None
    ub: np.ndarray = None
    G: np.ndarray = None
    h: np.ndarray = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        d = self.g.size
        if self.H.shape != (d, d):
            raise QpError(f"H must be {d}x{d}")
        self.lb = (np.full(d, -np.inf) if self.lb is None
                   else np.asarray(self.lb, dtype=float).reshape(-1))
        self.ub = (np.full(d, np.inf) if self.ub is None
                   else np.asarray(self.ub, dtype=float).reshape(-1))
        if self.lb.size != d or self.ub.size != d:
            raise QpError("bound vectors must match the problem dimension")
        if np.any(self.lb > self.ub):
            raise QpError("inconsistent bounds: lb > ub")
        if self.G is None:
            self.G = np.zeros((0, d))
            self.h = np.zeros(0)
        else:
            self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
            self.h = np.asarray(self.h, dtype=float).reshape(-1)
            if self.G.shape[1] != d or self.G.shape[0] != self.h.size:
                raise QpError("G/h dimensions inconsistent")

    @property
    def dim(self) -> int:
        return self.g.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.g @ z)

    def dump_txt(self, path) -> None:
        """Plain-text matrix dump for offline cross-checking."""
        with open(path, "w") as f:
            for name, arr in (("H", self.H), ("g", self.g), ("lb", self.lb),
                              ("ub", self.ub), ("G", self.G), ("h", self.h)):
                arr = np.atleast_2d(arr)
                f.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
                for row in arr:
                    f.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: str                      # "Optimal" | "MaxIter" | "Infeasible"
    kkt_residual: float
    iterations: int
    solve_time: float
    duals: np.ndarray = None         # one multiplier per stacked constraint row
    active_set: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)


def _stack_constraints(qp: QpProblem):
    """All inequalities as rows a_i' z <= b_i; box rows first, then G rows."""
    d = qp.dim
    rows, rhs = [], []
    for i in range(d):
        if np.isfinite(qp.ub[i]):
            e = np.zeros(d); e[i] = 1.0
            rows.append(e); rhs.append(qp.ub[i])
    for i in range(d):
        if np.isfinite(qp.lb[i]):
            e = np.zeros(d); e[i] = -1.0
            rows.append(e); rhs.append(-qp.lb[i])
    if qp.G.shape[0]:
        rows.extend(qp.G)
        rhs.extend(qp.h)
    if rows:
        return np.vstack(rows), np.asarray(rhs, dtype=float)
    return np.zeros((0, d)), np.zeros(0)


def _ruiz_equilibrate(H, g, A, b, n_iter: int = 10):
    """Symmetric Ruiz scaling: z = D z~, constraint rows scaled by E."""
    d = H.shape[0]
    D = np.ones(d)
    E = np.ones(len(b))
    Hs, gs, As, bs = H.copy(), g.copy(), A.copy(), b.copy()
    for _ in range(n_iter):
        col = np.abs(Hs).max(axis=0)
        if As.shape[0]:
            col = np.maximum(col, np.abs(As).max(axis=0))
        col[col == 0.0] = 1.0
        dj = 1.0 / np.sqrt(col)
        Hs = Hs * dj[:, None] * dj[None, :]
        gs = gs * dj
        D = D * dj
        if As.shape[0]:
            As = As * dj[None, :]
            rn = np.abs(As).max(axis=1)
            rn[rn == 0.0] = 1.0
            ei = 1.0 / rn
            As = As * ei[:, None]
            bs = bs * ei
            E = E * ei
    return Hs, gs, As, bs, D, E


def _solve_kkt(H, A_W, g_rhs, b_rhs):
    """Solve [H A_W'; A_W 0] [z; lam] = [g_rhs; b_rhs]."""
    nW = A_W.shape[0]
    d = H.shape[0]
    if nW == 0:
        return np.linalg.solve(H, g_rhs), np.zeros(0)
    K = np.zeros((d + nW, d + nW))
    K[:d, :d] = H
    K[:d, d:] = A_W.T
    K[d:, :d] = A_W
    rhs = np.concatenate([g_rhs, b_rhs])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:d], sol[d:]


def _kkt_residual(H, g, A, b, z, lam):
    """max of stationarity, primal violation and complementarity residuals."""
    if A.shape[0]:
        stat = np.abs(H @ z + g + A.T @ lam).max()
        slack = A @ z - b
        primal = max(0.0, slack.max())
        comp = np.abs(lam * slack).max()
    else:
        stat = np.abs(H @ z + g).max()
        primal = comp = 0.0
    return float(max(stat, primal, comp))


def solve(qp: QpProblem, tol: float = 1e-6, max_iter: int = 4000,
          warm_active=None, scale: bool = True) -> QpSolution:
    """Solve the QP; returns a certified solution or a diagnostic status.

    ``warm_active`` optionally seeds the working set with stacked-row indices
    from a previous solve of a structurally identical problem.
    """
    t_start = time.perf_counter()
    d = qp.dim

    A_all, b_all = _stack_constraints(qp)
    H, g = qp.H, qp.g
    try:
        np.linalg.cholesky(H + 0.0 * np.eye(d))
    except np.linalg.LinAlgError:
        raise QpError("Hessian is not positive definite") from None

    if scale:
        Hs, gs, As, bs, D, E = _ruiz_equilibrate(H, g, A_all, b_all)
    else:
        Hs, gs, As, bs = H.copy(), g.copy(), A_all.copy(), b_all.copy()
        D, E = np.ones(d), np.ones(len(b_all))

    n_con = As.shape[0]
    iters = 0
    trace = []

    # working set initialization (warm start: verify duals, drop negatives)
    W: list = []
    if warm_active:
        W = sorted(int(i) for i in warm_active if 0 <= int(i) < n_con)
    while True:
        z, lamW = _solve_kkt(Hs, As[W], -gs, bs[W])
        iters += 1
        if len(W) and lamW.min() < -tol:
            W.pop(int(np.argmin(lamW)))
            continue
        break
    lamW = np.maximum(lamW, 0.0)
    trace.append(float(0.5 * z @ Hs @ z + gs @ z))

    status = "Optimal"
    stall = 0
    while True:
        if n_con == 0:
            break
        viol = As @ z - bs
        if len(W):
            viol[W] = -np.inf  # working-set rows are active by construction
        p = int(np.argmax(viol))
        if viol[p] <= tol:
            break
        if iters >= max_iter:
            status = "MaxIter"
            break

        # bring constraint p in, dropping blockers as their duals hit zero
        lam_p = 0.0
        infeasible = False
        while True:
            iters += 1
            u, v = _solve_kkt(Hs, As[W], As[p], np.zeros(len(W)))
            s = float(As[p] @ u)
            # blocking dual step among working-set rows with v_j > 0
            t2 = np.inf
            j_block = -1
            if len(W):
                pos = v > 1e-12
                if np.any(pos):
                    ratios = np.where(pos, lamW / np.where(pos, v, 1.0), np.inf)
                    j_block = int(np.argmin(ratios))
                    t2 = float(ratios[j_block])
            if s <= 1e-12:
                if not np.isfinite(t2):
                    status = "Infeasible"
                    infeasible = True
                    break
                # dual-only step: drop the blocker, retry
                lamW = lamW - t2 * v
                lam_p += t2
                W.pop(j_block)
                lamW = np.delete(lamW, j_block)
                continue
            t1 = float((As[p] @ z - bs[p]) / s)
            t = min(t1, t2)
            z = z - t * u
            if len(W):
                lamW = lamW - t * v
            lam_p += t
            if t1 <= t2:
                W.append(p)
                lamW = np.append(lamW, lam_p)
                break
            W.pop(j_block)
            lamW = np.delete(lamW, j_block)
            if iters >= max_iter:
                break
        obj = float(0.5 * z @ Hs @ z + gs @ z)
        if trace and obj <= trace[-1] + 1e-12:
            stall += 1
            if stall > 100:
                status = "MaxIter"
                trace.append(obj)
                break
        else:
            stall = 0
        trace.append(obj)
        if infeasible or status == "MaxIter":
            break

    lam_full = np.zeros(n_con)
    if len(W):
        lam_full[W] = lamW
    kkt = _kkt_residual(Hs, gs, As, bs, z, lam_full)
    if status == "Optimal" and kkt > tol:
        status = "MaxIter"

    z_orig = D * z
    duals_orig = E * lam_full
    return QpSolution(
        z=z_orig,
        objective=qp.objective(z_orig),
        status=status,
        kkt_residual=kkt,
        iterations=iters,
        solve_time=time.perf_counter() - t_start,
        duals=duals_orig,
        active_set=sorted(W),
        objective_trace=trace,
    )


def warm_start(qp: QpProblem, previous: QpSolution, tol: float = 1e-6,
               max_iter: int = 4000) -> QpSolution:
    """Solve seeding the working set from a previous solution's active set."""
    if previous is None or previous.z.size != qp.dim:
        raise QpError("warm start requires a previous solution of matching dimension")
    return solve(qp, tol=tol, max_iter=max_iter, warm_active=previous.active_set)
