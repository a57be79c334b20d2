"""Signal/observation sampling, the Wonham filter and pathwise functionals.

Filter scheme ``splitting`` is the exact Bayes recursion of the time-discretised
model: the increment dZ_k is generated by the state at t_k, so each step
multiplies by the Gaussian likelihood of dZ_k and then propagates with
expm(A dt).  ``euler`` integrates the Wonham SDE directly and is kept for
convergence studies.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .chain_core import (
    Generator,
    ModelError,
    ObservationModel,
    as_probability,
    as_state_function,
    carre_du_champ,
    min_row_rates,
    rayleigh_minimum,
)

DEFAULT_FLOOR = 1e-14

# stream ids for counter-based seeding, see trial_rng
SIGNAL_STREAM = 0
NOISE_STREAM = 1
INNER_STREAM_BASE = 16


class FilterError(RuntimeError):
    pass


def trial_rng(seed: int, trial: int, stream: int) -> np.random.Generator:
    """Independent generator for one (trial, stream) pair.

    Depends only on the three integers, so results do not change with batch
    size, thread count or execution order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial), int(stream)]))


def default_dt(A: Generator) -> float:
    rate = A.exit_rates.max()
    return 1e-3 / rate if rate > 0 else 1e-3


def make_grid(T: float, dt: float) -> np.ndarray:
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"dt = {dt} does not divide T = {T}")
    return np.linspace(0.0, T, n + 1)


@dataclass(frozen=True)
class CtmcPath:
    jump_times: np.ndarray
    states: np.ndarray  # states[k] holds on [jump_times[k-1], jump_times[k])
    horizon: float

    @property
    def initial_state(self) -> int:
        return int(self.states[0])

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def occupation(self, dim: int) -> np.ndarray:
        """Fraction of [0, T] spent in each state."""
        edges = np.concatenate([[0.0], self.jump_times, [self.horizon]])
        occ = np.zeros(dim)
        np.add.at(occ, self.states, np.diff(edges))
        return occ / self.horizon


def _draw_state(p: np.ndarray, u: float) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(p) - 1))


def _gillespie(rates: np.ndarray, x0: int, T: float, rng: np.random.Generator):
    exit_rates = -np.diag(rates)
    times, states = [], [x0]
    t, x = 0.0, x0
    while True:
        q = exit_rates[x]
        if q <= 0:
            warnings.warn(f"absorbing state {x} reached at t = {t:.4g}", stacklevel=3)
            break
        t += rng.exponential(1.0 / q)
        if t >= T:
            break
        jump = rates[x].copy()
        jump[x] = 0.0
        x = _draw_state(jump, rng.random())
        times.append(t)
        states.append(x)
    return np.array(times), np.array(states, dtype=int)


def sample_ctmc_path(A: Generator, mu0, T: float, seed=None) -> CtmcPath:
    """Exact path of the chain on [0, T] with X_0 ~ mu0."""
    mu0 = as_probability(mu0, A.dim, "mu0")
    if T <= 0:
        raise ValueError("T must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x0 = _draw_state(mu0, rng.random())
    times, states = _gillespie(A.rates, x0, T, rng)
    return CtmcPath(times, states, float(T))


@dataclass(frozen=True)
class ObservationPath:
    dt: float
    increments: np.ndarray  # (n, m)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def coarsen(self, factor: int) -> "ObservationPath":
        n = self.n_steps // factor
        inc = self.increments[: n * factor].reshape(n, factor, -1).sum(axis=1)
        return ObservationPath(self.dt * factor, inc)


def observation_increments(states: np.ndarray, obs: ObservationModel, dt: float, noise: np.ndarray) -> np.ndarray:
    """h(X_k) dt + sqrt(dt) R^{1/2} xi_k for states (..., n) and noise (..., n, m)."""
    return obs.h[states] * dt + np.sqrt(dt) * noise @ obs.R_chol.T


def sample_observations(path: CtmcPath, obs: ObservationModel, dt: float, seed=None) -> ObservationPath:
    grid = make_grid(path.horizon, dt)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    states = path.state_at(grid[:-1])
    if states.max() >= obs.dim:
        raise ModelError("path visits a state outside the observation model")
    noise = rng.standard_normal((len(grid) - 1, obs.channels))
    return ObservationPath(float(grid[1] - grid[0]), observation_increments(states, obs, grid[1] - grid[0], noise))


@dataclass(frozen=True)
class FilterTrajectory:
    grid: np.ndarray
    distributions: np.ndarray  # (n + 1, d)
    prior: np.ndarray
    scheme: str
    seed: int | None = None

    @property
    def terminal(self) -> np.ndarray:
        return self.distributions[-1]

    def expectation(self, f) -> np.ndarray:
        return self.distributions @ np.asarray(f, dtype=float)


def log_likelihood_weights(dz: np.ndarray, obs: ObservationModel, dt: float) -> np.ndarray:
    """log of exp(h(x)' R^-1 dz - h(x)' R^-1 h(x) dt / 2) for dz (..., m) -> (..., d)."""
    hRi = obs.h @ obs.R_inv
    quad = np.einsum("xm,xm->x", hRi, obs.h)
    return dz @ hRi.T - 0.5 * dt * quad


def _renormalise(p: np.ndarray, floor: float, step: int) -> np.ndarray:
    s = p.sum(axis=-1, keepdims=True)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise FilterError(f"normalisation constant vanished at step {step}")
    p = p / s
    if floor > 0:
        p = np.maximum(p, floor)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def splitting_step(pi, dz, P, obs, dt, floor=DEFAULT_FLOOR, step=0):
    logw = log_likelihood_weights(dz, obs, dt)
    logw = logw - logw.max(axis=-1, keepdims=True)
    post = _renormalise(pi * np.exp(logw), 0.0, step)
    return _renormalise(post @ P, floor, step)


def euler_step(pi, dz, A, obs, dt, floor=DEFAULT_FLOOR, step=0):
    pih = pi @ obs.h
    v = (dz - pih * dt) @ obs.R_inv
    gain = pi * (v @ obs.h.T - np.sum(pih * v, axis=-1, keepdims=True))
    new = pi + (pi @ A) * dt + gain
    return _renormalise(np.maximum(new, 0.0), floor, step)


def filter_batch(A: Generator, obs: ObservationModel, increments: np.ndarray, pi0: np.ndarray, dt: float,
                 scheme: str = "splitting", floor: float = DEFAULT_FLOOR, P: np.ndarray | None = None) -> np.ndarray:
    """Run the filter on a batch: increments (N, n, m), pi0 (N, d) -> (N, n + 1, d)."""
    N, n, _ = increments.shape
    out = np.empty((N, n + 1, A.dim))
    pi = np.array(pi0, dtype=float, copy=True)
    out[:, 0] = pi
    if scheme == "splitting":
        P = A.transition_matrix(dt) if P is None else P
        logw = log_likelihood_weights(increments, obs, dt)
        w = np.exp(logw - logw.max(axis=-1, keepdims=True))
        for k in range(n):
            post = pi * w[:, k]
            s = post.sum(axis=1, keepdims=True)
            if not np.all(s > 0) or not np.all(np.isfinite(s)):
                raise FilterError(f"normalisation constant vanished at step {k}")
            pi = (post / s) @ P
            pi /= pi.sum(axis=1, keepdims=True)
            if floor > 0 and pi.min() < floor:
                pi = _renormalise(pi, floor, k)
            out[:, k + 1] = pi
    elif scheme == "euler":
        for k in range(n):
            pi = euler_step(pi, increments[:, k], A.rates, obs, dt, floor, k)
            out[:, k + 1] = pi
    else:
        raise ValueError(f"unknown filter scheme {scheme!r}")
    return out


def run_wonham(A: Generator, obs: ObservationModel, Z: ObservationPath, pi0, scheme: str = "splitting",
               floor: float = DEFAULT_FLOOR, seed: int | None = None) -> FilterTrajectory:
    pi0 = as_probability(pi0, A.dim, "pi0")
    if obs.dim != A.dim or Z.increments.shape[1] != obs.channels:
        raise ModelError("observation path, model and generator dimensions do not match")
    dists = filter_batch(A, obs, Z.increments[None], pi0[None], Z.dt, scheme, floor)[0]
    return FilterTrajectory(Z.grid, dists, pi0, scheme, seed)


def kolmogorov_forward(A: Generator, mu0, grid) -> FilterTrajectory:
    """Marginal law mu0' exp(tA) on the grid."""
    mu0 = as_probability(mu0, A.dim, "mu0")
    grid = np.asarray(grid, dtype=float)
    out = np.empty((len(grid), A.dim))
    out[0] = mu0
    steps = np.diff(grid)
    cache: dict[float, np.ndarray] = {}
    p = mu0
    for k, h in enumerate(steps):
        key = round(float(h), 15)
        if key not in cache:
            cache[key] = A.transition_matrix(h)
        p = p @ cache[key]
        out[k + 1] = p
    return FilterTrajectory(grid, out, mu0, "kolmogorov")


def likelihood_ratio(pi_mu, pi_mubar) -> np.ndarray:
    pi_mu = np.asarray(pi_mu, dtype=float)
    pi_mubar = np.asarray(pi_mubar, dtype=float)
    if np.any(pi_mubar <= 0):
        raise ModelError("pi_mubar has a zero entry; keep the filter positivity floor > 0")
    return pi_mu / pi_mubar


def conditional_energy(pi, A: Generator, F) -> float:
    pi = as_probability(pi, A.dim, "pi")
    return float(pi @ carre_du_champ(A, F))


def conditional_variance(pi, F) -> float:
    pi = as_probability(pi)
    F = as_state_function(F, pi.shape[0], "F")
    return float(pi @ (F - pi @ F) ** 2)


@dataclass(frozen=True)
class BetaPath:
    grid: np.ndarray
    values: np.ndarray
    kind: str
    degenerate: np.ndarray = field(default=None)

    def integral(self) -> float:
        return float(trapezoid(self.values, self.grid))

    def time_average(self) -> float:
        return self.integral() / (self.grid[-1] - self.grid[0])


def rayleigh_batch(A: Generator, pis: np.ndarray) -> np.ndarray:
    """Conditional Rayleigh minimum for each row of ``pis`` (N, d).

    Rows with a zero entry go through the exact single-point routine.
    """
    pis = np.atleast_2d(np.asarray(pis, dtype=float))
    N, d = pis.shape
    if d == 1:
        return np.full(N, np.inf)
    out = np.empty(N)
    pos = np.all(pis > 0, axis=1)
    if pos.any():
        p = pis[pos]
        off = A.off_diagonal()
        W = p[:, :, None] * off[None]
        W = W + np.swapaxes(W, 1, 2)
        L = -W
        idx = np.arange(d)
        L[:, idx, idx] += W.sum(axis=2)
        s = np.sqrt(p)
        M = L / (s[:, :, None] * s[:, None, :])
        u = s / np.linalg.norm(s, axis=1, keepdims=True)
        shift = np.trace(M, axis1=1, axis2=2) + 1.0
        M = M + shift[:, None, None] * u[:, :, None] * u[:, None, :]
        out[pos] = np.maximum(np.linalg.eigvalsh(M)[:, 0], 0.0)
    for i in np.flatnonzero(~pos):
        out[i] = rayleigh_minimum(A, pis[i])
    return out


def beta_values(A: Generator, pis: np.ndarray, kind: str) -> np.ndarray:
    if kind == "min_row":
        return pis @ min_row_rates(A)
    if kind == "exact_rayleigh":
        shape = pis.shape[:-1]
        return rayleigh_batch(A, pis.reshape(-1, A.dim)).reshape(shape)
    raise ValueError(f"unknown beta kind {kind!r}")


def pathwise_beta(traj: FilterTrajectory, A: Generator, kind: str = "min_row") -> BetaPath:
    dists = traj.distributions
    values = beta_values(A, dists, kind)
    degenerate = np.sum(dists > 0, axis=1) < 2
    if kind == "exact_rayleigh" and degenerate.any():
        values = np.where(degenerate, np.inf, values)
    return BetaPath(traj.grid, values, kind, degenerate)


def exponential_martingale(traj_mu: FilterTrajectory, traj_mubar: FilterTrajectory, obs: ObservationModel,
                           Z: ObservationPath, weight_by_noise_inverse: bool = True, log: bool = False) -> np.ndarray:
    """Path of the Doleans exponential of the innovation gap D = pi^mu(h) - pi^mubar(h).

    ``weight_by_noise_inverse=False`` drops R^-1 from both integrals.
    """
    n = Z.n_steps
    if traj_mu.distributions.shape[0] != n + 1 or traj_mubar.distributions.shape[0] != n + 1:
        raise ValueError("trajectories and observation path are on different grids")
    if not (np.allclose(traj_mu.grid, Z.grid) and np.allclose(traj_mubar.grid, Z.grid)):
        raise ValueError("trajectories and observation path are on different grids")
    logA = log_exponential_martingale(traj_mu.distributions, traj_mubar.distributions, obs, Z.increments, Z.dt,
                                      weight_by_noise_inverse)
    return logA if log else np.exp(logA)


def log_exponential_martingale(pis_mu, pis_mubar, obs, increments, dt, weight_by_noise_inverse=True):
    """Vectorised log A on arrays (..., n + 1, d) and increments (..., n, m)."""
    Rinv = obs.R_inv if weight_by_noise_inverse else np.eye(obs.channels)
    hmu = pis_mu[..., :-1, :] @ obs.h
    hbar = pis_mubar[..., :-1, :] @ obs.h
    D = hmu - hbar
    DR = D @ Rinv
    inc = np.sum(DR * (increments - hbar * dt), axis=-1) - 0.5 * dt * np.sum(DR * D, axis=-1)
    logA = np.zeros(pis_mu.shape[:-1])
    logA[..., 1:] = np.cumsum(inc, axis=-1)
    return logA


def write_trajectory_csv(path, traj: FilterTrajectory, beta: BetaPath | None = None,
                         gamma_moments: np.ndarray | None = None) -> None:
    """Columns t, pi_1..pi_d, optional beta, optional gamma_mean/gamma_var."""
    path = Path(path)
    d = traj.distributions.shape[1]
    header = ["t"] + [f"pi_{i + 1}" for i in range(d)]
    cols = [traj.grid[:, None], traj.distributions]
    if beta is not None:
        header.append("beta")
        cols.append(beta.values[:, None])
    if gamma_moments is not None:
        header += ["gamma_mean", "gamma_var"]
        cols.append(np.asarray(gamma_moments).reshape(len(traj.grid), 2))
    data = np.hstack(cols)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(x)) for x in row])


def write_manifest(path, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps({"trials": entries}, indent=2, sort_keys=True))
