"""Generators, invariant measures and Poincare-type constants of finite CTMCs.

Probability vectors and state functions are plain 1-d numpy arrays; the
helpers ``as_probability`` and ``as_state_function`` validate them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components, shortest_path

ROW_SUM_TOL = 1e-12
SIMPLEX_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a generator, distribution or observation model is invalid."""


class ReducibleGeneratorError(ModelError):
    pass


@dataclass(frozen=True)
class Generator:
    """Rate matrix of a continuous-time Markov chain on ``dim`` states."""

    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1] or rates.shape[0] == 0:
            raise ModelError(f"rates must be a non-empty square matrix, got shape {rates.shape}")
        if not np.all(np.isfinite(rates)):
            raise ModelError("rates contain non-finite entries")
        off = rates - np.diag(np.diag(rates))
        if np.any(off < 0):
            i, j = np.argwhere(off < 0)[0]
            raise ModelError(f"negative off-diagonal rate A({i},{j}) = {rates[i, j]}")
        row_sums = rates.sum(axis=1)
        bad = np.flatnonzero(np.abs(row_sums) > ROW_SUM_TOL)
        if bad.size:
            raise ModelError(f"row {bad[0]} sums to {row_sums[bad[0]]:.3e}, not 0")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def dim(self) -> int:
        return self.rates.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def off_diagonal(self) -> np.ndarray:
        return self.rates - np.diag(np.diag(self.rates))

    def communicating_classes(self) -> np.ndarray:
        """Label of the strongly connected component of each state."""
        _, labels = connected_components(self.off_diagonal() > 0, directed=True, connection="strong")
        return labels

    def is_irreducible(self) -> bool:
        return bool(np.all(self.communicating_classes() == 0)) or self.dim == 1

    def non_communicating_pair(self) -> tuple[int, int] | None:
        """Some (i, j) such that j is not reachable from i, or None."""
        reach = shortest_path(self.off_diagonal() > 0, unweighted=True)
        bad = np.argwhere(~np.isfinite(reach))
        if bad.size == 0:
            return None
        return int(bad[0][0]), int(bad[0][1])

    def transition_matrix(self, dt: float) -> np.ndarray:
        return scipy.linalg.expm(self.rates * dt)


@dataclass(frozen=True)
class ObservationModel:
    """Observation function ``h`` (d x m) and noise covariance ``R`` (m x m, SPD)."""

    h: np.ndarray
    R: np.ndarray
    R_inv: np.ndarray = field(init=False, repr=False)
    R_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        R = np.atleast_2d(np.array(self.R, dtype=float))
        if h.ndim != 2:
            raise ModelError("h must be a d x m array")
        m = h.shape[1]
        if R.shape != (m, m):
            raise ModelError(f"R must be {m} x {m}, got {R.shape}")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(R))):
            raise ModelError("h and R must be finite")
        if not np.allclose(R, R.T, rtol=0, atol=1e-12):
            raise ModelError("R is not symmetric")
        try:
            chol = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ModelError("R is not positive definite") from None
        h.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "R_chol", chol)
        object.__setattr__(self, "R_inv", np.linalg.inv(R))

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @property
    def channels(self) -> int:
        return self.h.shape[1]


@dataclass(frozen=True)
class FilteringModel:
    generator: Generator
    observation: ObservationModel

    def __post_init__(self):
        if self.generator.dim != self.observation.dim:
            raise ModelError(
                f"h has {self.observation.dim} rows but the generator has {self.generator.dim} states"
            )

    @property
    def dim(self) -> int:
        return self.generator.dim


def load_model(path) -> FilteringModel:
    """Read a model JSON file: {"dim", "rates", "h", "R"}."""
    return model_from_dict(json.loads(Path(path).read_text()))


def model_from_dict(data: dict) -> FilteringModel:
    for key in ("dim", "rates"):
        if key not in data:
            raise ModelError(f"model is missing field '{key}'")
    dim = data["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise ModelError(f"dim must be a positive integer, got {dim!r}")
    rates = np.asarray(data["rates"], dtype=float)
    if rates.shape != (dim, dim):
        raise ModelError(f"rates must be {dim} x {dim}, got {rates.shape}")
    gen = Generator(rates)
    h = data.get("h", np.zeros((dim, 1)))
    R = data.get("R", np.eye(np.atleast_2d(np.asarray(h, dtype=float).T).shape[0]))
    obs = ObservationModel(np.asarray(h, dtype=float), np.asarray(R, dtype=float))
    return FilteringModel(gen, obs)


def model_to_dict(model: FilteringModel) -> dict:
    return {
        "dim": model.dim,
        "rates": model.generator.rates.tolist(),
        "h": model.observation.h.tolist(),
        "R": model.observation.R.tolist(),
    }


def as_probability(p, dim: int | None = None, name: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ModelError(f"{name} must be a vector")
    if dim is not None and p.shape[0] != dim:
        raise ModelError(f"{name} has {p.shape[0]} entries, expected {dim}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ModelError(f"{name} has negative or non-finite entries")
    if abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ModelError(f"{name} sums to {p.sum()!r}, not 1")
    return p


def is_everywhere_positive(p, floor: float = 0.0) -> bool:
    return bool(np.all(np.asarray(p) > floor))


def as_state_function(f, dim: int, name: str = "f") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != (dim,):
        raise ModelError(f"{name} must have shape ({dim},), got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ModelError(f"{name} has non-finite entries")
    return f


def invariant_measure(A: Generator) -> np.ndarray:
    """Stationary distribution of an irreducible generator."""
    if not A.is_irreducible():
        i, j = A.non_communicating_pair()
        raise ReducibleGeneratorError(f"generator is reducible: state {j} is not reachable from state {i}")
    d = A.dim
    # replace one balance equation by the normalisation
    M = A.rates.T.copy()
    M[-1, :] = 1.0
    rhs = np.zeros(d)
    rhs[-1] = 1.0
    mu = np.linalg.solve(M, rhs)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def carre_du_champ(A: Generator, f) -> np.ndarray:
    f = as_state_function(f, A.dim)
    diff = f[:, None] - f[None, :]
    return np.sum(A.off_diagonal() * diff**2, axis=1)


def energy(mu, A: Generator, f) -> float:
    mu = as_probability(mu, A.dim, "mu")
    return float(mu @ carre_du_champ(A, f))


def variance(mu, f) -> float:
    mu = as_probability(mu)
    f = as_state_function(f, mu.shape[0])
    return float(mu @ (f - mu @ f) ** 2)


def energy_form(A: Generator, pi: np.ndarray) -> np.ndarray:
    """Symmetric matrix L with f'Lf = sum_ij pi(i) A(i,j) (f(i) - f(j))^2."""
    W = pi[:, None] * A.off_diagonal()
    W = W + W.T
    return np.diag(W.sum(axis=1)) - W


def rayleigh_minimum(A: Generator, pi: np.ndarray) -> float:
    """inf over f with nonzero pi-variance of energy / variance under ``pi``.

    Returns ``inf`` when ``pi`` charges fewer than two states.
    """
    pi = np.asarray(pi, dtype=float)
    L = energy_form(A, pi)
    support = pi > 0
    if support.sum() < 2:
        return float("inf")
    if not support.all():
        # minimise the energy over the free coordinates (Schur complement)
        S, F = support, ~support
        L_ff = L[np.ix_(F, F)]
        L = L[np.ix_(S, S)] - L[np.ix_(S, F)] @ np.linalg.pinv(L_ff) @ L[np.ix_(F, S)]
        pi = pi[S]
    # g = sqrt(pi) * f, restricted to the complement of sqrt(pi)
    s = np.sqrt(pi)
    M = L / np.outer(s, s)
    u = s / np.linalg.norm(s)
    Q = scipy.linalg.null_space(u[None, :])
    vals = np.linalg.eigvalsh(Q.T @ M @ Q)
    return float(max(vals[0], 0.0))


def standard_pi_constant(A: Generator, mu_bar) -> float:
    """Largest c0 with energy >= c0 * variance under the invariant measure."""
    if not A.is_irreducible():
        warnings.warn("reducible generator: the standard Poincare inequality fails, c0 = 0", stacklevel=2)
        return 0.0
    mu_bar = as_probability(mu_bar, A.dim, "mu_bar")
    if A.dim == 1:
        return float("inf")
    return rayleigh_minimum(A, mu_bar)


@dataclass(frozen=True)
class PiConstants:
    standard_c0: float
    min_column_sum: float
    geometric_mean_min: float
    doeblin: float
    min_row_average: float

    # constants valid for the conditional PI at every time when positive
    CERTIFYING = ("min_column_sum", "geometric_mean_min", "doeblin")

    def certifies(self) -> dict[str, bool]:
        return {name: getattr(self, name) > 0 for name in self.CERTIFYING}

    def best_conditional(self) -> float:
        """Max of the positive certifying constants, 0 if there are none."""
        vals = [getattr(self, name) for name in self.CERTIFYING if getattr(self, name) > 0]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "standard_c0": self.standard_c0,
            "min_column_sum": self.min_column_sum,
            "geometric_mean_min": self.geometric_mean_min,
            "doeblin": self.doeblin,
            "min_row_average": self.min_row_average,
            "certifies": self.certifies(),
            "best_conditional": self.best_conditional(),
        }


def _masked_off_diagonal(A: Generator) -> np.ndarray:
    off = A.off_diagonal().copy()
    np.fill_diagonal(off, np.inf)
    return off


def min_row_rates(A: Generator) -> np.ndarray:
    """min_{j != i} A(i, j) for every i."""
    if A.dim == 1:
        return np.zeros(1)
    return _masked_off_diagonal(A).min(axis=1)


def conditional_pi_constants(A: Generator, mu_bar) -> PiConstants:
    d = A.dim
    mu_bar = as_probability(mu_bar, d, "mu_bar")
    if d == 1:
        return PiConstants(standard_pi_constant(A, mu_bar), 0.0, 0.0, 0.0, 0.0)
    off = _masked_off_diagonal(A)
    col_min = off.min(axis=0)
    geo = np.sqrt(off * off.T)
    return PiConstants(
        standard_c0=standard_pi_constant(A, mu_bar),
        min_column_sum=float(col_min.sum()),
        geometric_mean_min=float(geo.min()),
        doeblin=float(col_min.max()),
        min_row_average=float(mu_bar @ min_row_rates(A)),
    )


def two_state(lam1: float, lam2: float) -> Generator:
    return Generator(np.array([[-lam1, lam1], [lam2, -lam2]]))


def delyon_cycle() -> Generator:
    """The 4-state unidirectional cycle on which the conditional PI fails."""
    return Generator(np.roll(np.eye(4), 1, axis=1) - np.eye(4))
