"""Candidate lifting-function library and recursive coefficient scoring.

A library of scalar candidate functions over the (normalized) state is scored
by a Kalman-filter recursion: the coefficient matrix that regresses the state
onto the library row is estimated sample by sample, and rows whose final
coefficients exceed a threshold in magnitude mark the functions kept for the
lifted linear model.

States are affinely normalized to ~[0, 1] per coordinate (training-data
min/max) before any library function is evaluated; raw temperatures near
500 K would otherwise make powers and exponentials numerically hopeless.  The
normalization map travels with the selected lifting so the lifted coordinates
are well-defined at deployment time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LiftingDomainError",
    "StateScaler",
    "LibraryEntry",
    "LibraryConfig",
    "FunctionLibrary",
    "KalmanGsindyConfig",
    "CoefficientEstimate",
    "LiftingMap",
    "build_library",
    "evaluate_theta_row",
    "kalman_gsindy_step",
    "run_kalman_gsindy",
    "select_functions",
    "selection_row_scores",
]

# shift added to normalized states under fractional/negative exponents so the
# guard domain starts strictly above zero
POWER_SHIFT = 1e-3

DEFAULT_POWERS = (-0.5, 0.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)

# the benchmark case-study library: powers, the two rational-power forms,
# exponentials, cross-products, RBFs and Hermite polynomials (sin/cos stay
# available but are not enabled by default)
DEFAULT_FAMILIES = ("power", "ratpow", "exp", "gauss", "cross", "rbf", "hermite")


class LiftingDomainError(ValueError):
    """A library function was evaluated outside its guarded domain."""


@dataclass(frozen=True)
class StateScaler:
    """Per-coordinate affine map onto ~[0, 1] fitted from training data."""

    lo: tuple
    hi: tuple

    @classmethod
    def from_data(cls, states) -> "StateScaler":
        states = np.atleast_2d(np.asarray(states, dtype=float))
        lo = states.min(axis=0)
        hi = states.max(axis=0)
        span = hi - lo
        degenerate = span < 1e-12
        hi = np.where(degenerate, lo + 1.0, hi)
        return cls(lo=tuple(lo.tolist()), hi=tuple(hi.tolist()))

    @classmethod
    def identity(cls, n: int) -> "StateScaler":
        return cls(lo=(0.0,) * n, hi=(1.0,) * n)

    @property
    def n(self) -> int:
        return len(self.lo)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return (x - lo) / (hi - lo)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "StateScaler":
        return cls(lo=tuple(d["lo"]), hi=tuple(d["hi"]))


def _hermite_e(degree: int, x):
    """Probabilists' Hermite polynomial He_degree evaluated elementwise."""
    coeffs = np.zeros(degree + 1)
    coeffs[degree] = 1.0
    return np.polynomial.hermite_e.hermeval(x, coeffs)


@dataclass(frozen=True)
class LibraryEntry:
    """One candidate scalar function, identified by kind plus parameters."""

    kind: str
    index: int = -1
    indices: tuple = ()
    exponent: float = 0.0
    degree: int = 0
    center: tuple = ()
    width: float = 0.0

    @property
    def name(self) -> str:
        v = lambda i: f"x{i + 1}"
        if self.kind in ("sin", "cos"):
            return f"{self.kind}({v(self.index)})"
        if self.kind == "power":
            return f"{v(self.index)}^{self.exponent:g}"
        if self.kind == "ratpow":
            return f"(1+0.25*{v(self.index)}^2)^{self.exponent:g}"
        if self.kind == "exp":
            return f"exp({v(self.index)})"
        if self.kind == "gauss":
            return f"exp(-0.2*{v(self.index)}^2)"
        if self.kind == "cross":
            return "*".join(v(i) for i in self.indices)
        if self.kind == "rbf":
            return f"rbf(c={np.round(self.center, 3).tolist()}, w={self.width:.3g})"
        if self.kind == "hermite":
            return f"He{self.degree}({v(self.index)})"
        raise ValueError(f"unknown entry kind {self.kind!r}")

    def key(self) -> tuple:
        return (self.kind, self.index, self.indices, self.exponent,
                self.degree, self.center, round(self.width, 12))

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        """Evaluate on already-normalized states, X of shape (K, n)."""
        if self.kind == "sin":
            return np.sin(X[:, self.index])
        if self.kind == "cos":
            return np.cos(X[:, self.index])
        if self.kind == "power":
            x = X[:, self.index]
            if float(self.exponent).is_integer() and self.exponent >= 0:
                return x ** self.exponent
            base = x + POWER_SHIFT
            if np.any(base <= 0.0):
                raise LiftingDomainError(
                    f"entry '{self.name}': normalized state below the power-domain "
                    f"guard (min base {base.min():.3g})")
            return base ** self.exponent
        if self.kind == "ratpow":
            x = X[:, self.index]
            return (1.0 + 0.25 * x * x) ** self.exponent
        if self.kind == "exp":
            return np.exp(X[:, self.index])
        if self.kind == "gauss":
            x = X[:, self.index]
            return np.exp(-0.2 * x * x)
        if self.kind == "cross":
            return np.prod(X[:, list(self.indices)], axis=1)
        if self.kind == "rbf":
            d2 = np.sum((X - np.asarray(self.center)) ** 2, axis=1)
            return np.exp(-d2 / (2.0 * self.width ** 2))
        if self.kind == "hermite":
            return _hermite_e(self.degree, X[:, self.index])
        raise ValueError(f"unknown entry kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("sin", "cos", "exp", "gauss"):
            d["index"] = self.index
        elif self.kind == "power":
            d.update(index=self.index, exponent=self.exponent)
        elif self.kind == "ratpow":
            d.update(index=self.index, exponent=self.exponent)
        elif self.kind == "cross":
            d["indices"] = list(self.indices)
        elif self.kind == "rbf":
            d.update(center=list(self.center), width=self.width)
        elif self.kind == "hermite":
            d.update(index=self.index, degree=self.degree)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LibraryEntry":
        kw = dict(d)
        kind = kw.pop("kind")
        if "indices" in kw:
            kw["indices"] = tuple(kw["indices"])
        if "center" in kw:
            kw["center"] = tuple(kw["center"])
        return cls(kind=kind, **kw)


@dataclass(frozen=True)
class LibraryConfig:
    """Which candidate families to enumerate and their parameters."""

    families: tuple = DEFAULT_FAMILIES
    powers: tuple = DEFAULT_POWERS
    ratpow_exponents: tuple = (-0.5, 0.5)
    max_subset_size: int = 9
    n_rbf: int = 9
    hermite_degrees: tuple = (2, 3, 4)

    @classmethod
    def from_dict(cls, d: dict) -> "LibraryConfig":
        kw = {}
        for name in ("families", "powers", "ratpow_exponents", "hermite_degrees"):
            if name in d:
                kw[name] = tuple(d[name])
        for name in ("max_subset_size", "n_rbf"):
            if name in d:
                kw[name] = int(d[name])
        return cls(**kw)


@dataclass
class FunctionLibrary:
    """Ordered candidate lifting functions over an n-dimensional state."""

    state_dim: int
    entries: list

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            k = e.key()
            if k in seen:
                raise ValueError(f"duplicate library entry: {e.name}")
            seen.add(k)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list:
        return [e.name for e in self.entries]

    def theta_matrix(self, X_norm) -> np.ndarray:
        """Candidate-function values for normalized samples, shape (K, N_L)."""
        X_norm = np.atleast_2d(np.asarray(X_norm, dtype=float))
        out = np.empty((X_norm.shape[0], self.size))
        for j, e in enumerate(self.entries):
            out[:, j] = e.evaluate_many(X_norm)
        return out


def _subsets(n: int, max_size: int):
    """All index subsets of size 2..max_size in deterministic order."""
    from itertools import combinations
    for size in range(2, min(max_size, n) + 1):
        yield from combinations(range(n), size)


def build_library(config: LibraryConfig, state_dim: int,
                  samples_norm=None, seed=None) -> FunctionLibrary:
    """Enumerate the configured candidate families in a deterministic order.

    RBF centers are drawn (seeded) from the provided normalized training
    samples and the shared width is the median pairwise distance among the
    chosen centers.
    """
    if not config.families:
        raise ValueError("at least one library family must be enabled")
    entries = []
    for family in config.families:
        if family == "sin":
            entries += [LibraryEntry("sin", index=i) for i in range(state_dim)]
        elif family == "cos":
            entries += [LibraryEntry("cos", index=i) for i in range(state_dim)]
        elif family == "power":
            entries += [LibraryEntry("power", index=i, exponent=p)
                        for i in range(state_dim) for p in config.powers]
        elif family == "ratpow":
            entries += [LibraryEntry("ratpow", index=i, exponent=p)
                        for i in range(state_dim) for p in config.ratpow_exponents]
        elif family == "exp":
            entries += [LibraryEntry("exp", index=i) for i in range(state_dim)]
        elif family == "gauss":
            entries += [LibraryEntry("gauss", index=i) for i in range(state_dim)]
        elif family == "cross":
            entries += [LibraryEntry("cross", indices=idx)
                        for idx in _subsets(state_dim, config.max_subset_size)]
        elif family == "rbf":
            if samples_norm is None:
                raise ValueError("'rbf' family needs training samples for centers")
            samples_norm = np.atleast_2d(np.asarray(samples_norm, dtype=float))
            rng = np.random.default_rng(seed)
            n_rbf = min(config.n_rbf, len(samples_norm))
            picks = rng.choice(len(samples_norm), size=n_rbf, replace=False)
            centers = samples_norm[np.sort(picks)]
            diffs = centers[:, None, :] - centers[None, :, :]
            dists = np.sqrt((diffs ** 2).sum(-1))
            width = float(np.median(dists[np.triu_indices(n_rbf, k=1)])) if n_rbf > 1 else 1.0
            width = max(width, 1e-6)
            entries += [LibraryEntry("rbf", center=tuple(c.tolist()), width=width)
                        for c in centers]
        elif family == "hermite":
            entries += [LibraryEntry("hermite", index=i, degree=d)
                        for i in range(state_dim) for d in config.hermite_degrees]
        else:
            raise ValueError(f"unknown library family {family!r}")
    return FunctionLibrary(state_dim=state_dim, entries=entries)


def evaluate_theta_row(lib: FunctionLibrary, x_norm) -> np.ndarray:
    """Library row for one normalized state sample, shape (N_L,)."""
    return lib.theta_matrix(np.atleast_2d(x_norm))[0]


@dataclass(frozen=True)
class KalmanGsindyConfig:
    """Noise scales and selection threshold of the coefficient recursion."""

    q_proc: float = 1e-6
    r_meas: float = 1e-2
    p0: float = 100.0
    lam: float = 0.1

    def __post_init__(self):
        for name in ("q_proc", "r_meas", "p0", "lam"):
            if getattr(self, name) < 0 or (name != "q_proc" and getattr(self, name) <= 0):
                raise ValueError(f"KalmanGsindyConfig.{name} must be positive")


@dataclass
class CoefficientEstimate:
    """Recursive estimate of the library-coefficient matrix and its covariance."""

    omega: np.ndarray   # (N_L, n)
    P: np.ndarray       # (N_L, N_L)
    k: int = 0

    @classmethod
    def initial(cls, n_library: int, n_state: int, p0: float) -> "CoefficientEstimate":
        return cls(omega=np.zeros((n_library, n_state)),
                   P=p0 * np.eye(n_library), k=0)

    def min_eig_ratio(self) -> float:
        """Smallest eigenvalue of P relative to ||P||, for PSD auditing."""
        w = np.linalg.eigvalsh(self.P)
        scale = max(abs(w).max(), 1e-300)
        return float(w.min() / scale)


def _kalman_update_inplace(omega, P, theta, measurement, q_proc, r_meas):
    """One prediction + correction sweep; mutates omega and P."""
    if q_proc != 0.0:
        idx = np.arange(len(P))
        P[idx, idx] += q_proc
    Pt = P @ theta                      # (N_L,)
    s = float(theta @ Pt) + r_meas      # scalar innovation covariance
    if s <= 0.0:
        raise ValueError(f"non-positive innovation covariance s={s:.3g}; "
                         "check the measurement-noise scale")
    gain = Pt / s                       # (N_L,)
    innov = measurement - theta @ omega  # (n,)
    omega += np.outer(gain, innov)
    P -= np.outer(gain, Pt)
    P += P.T.copy()
    P *= 0.5


def kalman_gsindy_step(est: CoefficientEstimate, measurement, theta_row,
                       cfg: KalmanGsindyConfig) -> CoefficientEstimate:
    """One recursion step; returns a new estimate (the input is not mutated)."""
    theta = np.asarray(theta_row, dtype=float).reshape(-1)
    measurement = np.asarray(measurement, dtype=float).reshape(-1)
    if theta.size != est.omega.shape[0]:
        raise ValueError("theta row length does not match the library size")
    omega = est.omega.copy()
    P = est.P.copy()
    _kalman_update_inplace(omega, P, theta, measurement, cfg.q_proc, cfg.r_meas)
    return CoefficientEstimate(omega=omega, P=P, k=est.k + 1)


def run_kalman_gsindy(dataset, lib: FunctionLibrary, cfg: KalmanGsindyConfig,
                      scaler: StateScaler | None = None) -> CoefficientEstimate:
    """Fold the recursion over every sample of a trajectory dataset.

    The regression target of each step is the normalized state itself, so the
    recursion scores how well each candidate function tracks the state
    coordinates over the data distribution.
    """
    states = np.atleast_2d(np.asarray(dataset.states, dtype=float))
    if len(states) < 1:
        raise ValueError("dataset must contain at least one sample")
    if scaler is None:
        scaler = StateScaler.from_data(states)
    X = scaler.transform(states)
    Theta = lib.theta_matrix(X)
    est = CoefficientEstimate.initial(lib.size, states.shape[1], cfg.p0)
    omega, P = est.omega, est.P
    for k in range(len(states)):
        _kalman_update_inplace(omega, P, Theta[k], X[k], cfg.q_proc, cfg.r_meas)
    return CoefficientEstimate(omega=omega, P=P, k=len(states))


def selection_row_scores(est: CoefficientEstimate) -> np.ndarray:
    """Per-row selection score: the largest coefficient magnitude in the row."""
    return np.abs(est.omega).max(axis=1)


@dataclass
class LiftingMap:
    """The assembled lifting: raw state prefix plus selected library functions.

    The first n components of the lifted vector are the raw state; the
    remaining components evaluate the selected entries on the normalized
    state.  ``scaler`` is the normalization fitted on training data.
    """

    state_dim: int
    entries: list
    scaler: StateScaler
    selected_indices: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.state_dim + len(self.entries)

    @property
    def names(self) -> list:
        return [f"x{i + 1}" for i in range(self.state_dim)] + [e.name for e in self.entries]

    def evaluate_many(self, X_raw) -> np.ndarray:
        X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
        out = np.empty((X_raw.shape[0], self.dim))
        out[:, :self.state_dim] = X_raw
        if self.entries:
            Xn = self.scaler.transform(X_raw)
            for j, e in enumerate(self.entries):
                out[:, self.state_dim + j] = e.evaluate_many(Xn)
        return out

    def evaluate(self, x_raw) -> np.ndarray:
        return self.evaluate_many(np.atleast_2d(x_raw))[0]

    @classmethod
    def identity(cls, state_dim: int) -> "LiftingMap":
        return cls(state_dim=state_dim, entries=[],
                   scaler=StateScaler.identity(state_dim))

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "entries": [e.to_dict() for e in self.entries],
            "scaler": self.scaler.to_dict(),
            "selected_indices": list(self.selected_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LiftingMap":
        return cls(state_dim=int(d["state_dim"]),
                   entries=[LibraryEntry.from_dict(e) for e in d["entries"]],
                   scaler=StateScaler.from_dict(d["scaler"]),
                   selected_indices=list(d.get("selected_indices", [])))


def select_functions(est: CoefficientEstimate, lam: float,
                     lib: FunctionLibrary, scaler: StateScaler) -> LiftingMap:
    """Keep entries whose row of final coefficients exceeds ``lam`` in magnitude.

    Falls back (with a warning) to the identity lifting when nothing clears
    the threshold.
    """
    if lam <= 0:
        raise ValueError("selection threshold must be positive")
    scores = selection_row_scores(est)
    selected = [i for i in range(lib.size) if scores[i] > lam]
    if not selected:
        warnings.warn("no library entry cleared the selection threshold; "
                      "falling back to the identity lifting")
        return LiftingMap(state_dim=lib.state_dim, entries=[], scaler=scaler)
    return LiftingMap(state_dim=lib.state_dim,
                      entries=[lib.entries[i] for i in selected],
                      scaler=scaler,
                      selected_indices=selected)
