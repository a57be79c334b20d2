"""Monte Carlo ensembles of paired Wonham filters.

Each trial draws X_0 from the sampling prior, simulates the signal exactly,
samples observations on the grid and runs the filter twice, from ``mu`` and
from ``mu_bar``.  Randomness comes from ``trial_rng(seed, trial, stream)``, so
ensembles under P^mu and P^mubar with the same seed share random numbers trial
by trial, and results do not depend on batching or threads.

The dual process Y with terminal value gamma_T is represented through its
Zakai form: for every unnormalised filter sigma, sigma_t(Y_t) is a martingale
under the reference measure.  At a window boundary t_k this gives

    Y_{t_k}(x) = E[ (Psi gamma_T)(x) / (pibar_{t_k}' Psi 1) | Z_{t_k} ],

where Psi is the product of likelihood weights and transition matrices over
(t_k, T] along a continuation started from X_{t_k} ~ pibar_{t_k}.  One
continuation gives an unbiased estimate Yhat, and pibar_{t_k}(Yhat) = 1 holds
exactly.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .chain_core import FilteringModel
from .simulate import (
    DEFAULT_FLOOR,
    INNER_STREAM_BASE,
    NOISE_STREAM,
    SIGNAL_STREAM,
    _draw_state,
    _gillespie,
    beta_values,
    filter_batch,
    log_exponential_martingale,
    log_likelihood_weights,
    make_grid,
    observation_increments,
    trial_rng,
)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("FILTSTAB_THREADS", "1")))
    except ValueError:
        return 1


def sample_batch(model: FilteringModel, x0_dists: np.ndarray, n_steps: int, dt: float, seed: int,
                 trials: np.ndarray, streams: tuple[int, int] = (SIGNAL_STREAM, NOISE_STREAM)):
    """Grid states (N, n) and observation increments (N, n, m) for each trial.

    ``x0_dists`` is one distribution (d,) or one per trial (N, d).
    """
    rates = model.generator.rates
    obs = model.observation
    N = len(trials)
    x0_dists = np.broadcast_to(x0_dists, (N, model.dim))
    grid = np.arange(n_steps) * dt
    T = n_steps * dt
    states = np.empty((N, n_steps), dtype=int)
    noise = np.empty((N, n_steps, obs.channels))
    for i, trial in enumerate(trials):
        rng = trial_rng(seed, trial, streams[0])
        x0 = _draw_state(x0_dists[i], rng.random())
        times, path = _gillespie(rates, x0, T, rng)
        states[i] = path[np.searchsorted(times, grid, side="right")]
        noise[i] = trial_rng(seed, trial, streams[1]).standard_normal((n_steps, obs.channels))
    return states, observation_increments(states, obs, dt, noise)


@dataclass
class EnsembleResult:
    """Per-trial outputs, all arrays indexed by trial along axis 0."""

    grid: np.ndarray
    boundaries: np.ndarray       # indices into grid, last one is the terminal index
    pi_mu: np.ndarray            # (N, K + 1, d) filters at the boundaries
    pi_bar: np.ndarray           # (N, K + 1, d)
    log_A: np.ndarray            # (N, K + 1)
    y_hat: np.ndarray | None     # (N, K + 1, n_inner, d); terminal slice is gamma_T
    snapshots: np.ndarray        # indices of the L1 snapshot horizons
    l1_error: np.ndarray | None  # (N, H) |pi^mu(f) - pi^mubar(f)|
    beta_integral: dict          # kind -> (N,) integral of beta along pi^mubar
    under: str

    @property
    def n_trials(self) -> int:
        return self.pi_mu.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid[self.boundaries]

    @property
    def gamma_T(self) -> np.ndarray:
        return self.pi_mu[:, -1] / self.pi_bar[:, -1]

    @property
    def S_T(self) -> np.ndarray:
        """pi_T^mu(gamma_T) - 1, equal to the conditional variance of gamma_T."""
        g = self.gamma_T
        return np.sum(self.pi_bar[:, -1] * (g - 1.0) ** 2, axis=1)

    @property
    def A_T(self) -> np.ndarray:
        return np.exp(self.log_A[:, -1])


def _inner_dual(model, P, pi_mu_k, pi_bar_k, k0, n, dt, seed, trials, stream):
    """Yhat at boundary index k0 from one continuation per trial."""
    obs = model.observation
    states, inc = sample_batch(model, pi_bar_k, n - k0, dt, seed, trials, (stream, stream + 1))
    logw = log_likelihood_weights(inc, obs, dt)
    w = np.exp(logw - logw.max(axis=-1, keepdims=True))
    N, d = pi_bar_k.shape
    Psi = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    for j in range(n - k0):
        Psi = (Psi * w[:, j, None, :]) @ P
        if j % 8 == 7:
            Psi /= Psi.sum(axis=(1, 2), keepdims=True)
    row_mu = np.einsum("nd,nde->ne", pi_mu_k, Psi)
    row_bar = np.einsum("nd,nde->ne", pi_bar_k, Psi)
    gamma = (row_mu / row_mu.sum(axis=1, keepdims=True)) / (row_bar / row_bar.sum(axis=1, keepdims=True))
    return np.einsum("nde,ne->nd", Psi, gamma) / row_bar.sum(axis=1, keepdims=True)


def _run_batch(model, mu, mu_bar, n, dt, seed, trials, under, boundaries, snapshots, n_inner, f, beta_kinds,
               floor, weight_by_noise_inverse):
    A = model.generator
    obs = model.observation
    P = A.transition_matrix(dt)
    x0 = mu if under == "mu" else mu_bar
    _, inc = sample_batch(model, x0, n, dt, seed, trials)
    N = len(trials)
    priors = np.vstack([np.tile(mu, (N, 1)), np.tile(mu_bar, (N, 1))])
    both = filter_batch(A, obs, np.concatenate([inc, inc]), priors, dt, "splitting", floor, P)
    traj_mu, traj_bar = both[:N], both[N:]
    log_A = log_exponential_martingale(traj_mu, traj_bar, obs, inc, dt, weight_by_noise_inverse)

    grid = np.arange(n + 1) * dt
    beta_int = {kind: trapezoid(beta_values(A, traj_bar, kind), grid, axis=1) for kind in beta_kinds}
    l1 = None
    if f is not None:
        l1 = np.abs(traj_mu[:, snapshots] @ f - traj_bar[:, snapshots] @ f)

    y_hat = None
    if n_inner:
        K = len(boundaries)
        y_hat = np.empty((N, K, n_inner, model.dim))
        y_hat[:, -1] = (traj_mu[:, n] / traj_bar[:, n])[:, None, :]
        for kk, k0 in enumerate(boundaries[:-1]):
            for s in range(n_inner):
                stream = INNER_STREAM_BASE + 2 * (kk * n_inner + s)
                y_hat[:, kk, s] = _inner_dual(model, P, traj_mu[:, k0], traj_bar[:, k0], k0, n, dt, seed,
                                              trials, stream)
    return dict(pi_mu=traj_mu[:, boundaries], pi_bar=traj_bar[:, boundaries], log_A=log_A[:, boundaries],
                y_hat=y_hat, l1=l1, beta=beta_int)


def run_ensemble(model: FilteringModel, mu, mu_bar, T: float, dt: float, n_trials: int, seed: int,
                 under: str = "mu_bar", n_windows: int = 4, n_inner: int = 0, f=None, horizons=None,
                 beta_kinds=(), floor: float = DEFAULT_FLOOR, batch_size: int = 1000,
                 weight_by_noise_inverse: bool = True, first_trial: int = 0) -> EnsembleResult:
    """Simulate ``n_trials`` paired filter runs under P^mu (``under='mu'``) or P^mubar.

    Window boundaries split [0, T] into ``n_windows`` equal pieces; the dual
    estimate is computed at each with ``n_inner`` independent continuations.
    ``horizons`` lists the times at which the L1 error of ``f`` is recorded.
    """
    if under not in ("mu", "mu_bar"):
        raise ValueError("under must be 'mu' or 'mu_bar'")
    grid = make_grid(T, dt)
    n = len(grid) - 1
    dt = float(grid[1] - grid[0])
    mu = np.asarray(mu, dtype=float)
    mu_bar = np.asarray(mu_bar, dtype=float)
    boundaries = np.round(np.linspace(0, n, n_windows + 1)).astype(int)
    horizons = [T] if horizons is None else list(horizons)
    snapshots = np.array([int(round(h / dt)) for h in horizons])
    if np.any(snapshots < 0) or np.any(snapshots > n) or np.any(np.abs(snapshots * dt - horizons) > 1e-9):
        raise ValueError("horizons must lie on the simulation grid")
    f = None if f is None else np.asarray(f, dtype=float)

    trials = np.arange(first_trial, first_trial + n_trials)
    chunks = [trials[i:i + batch_size] for i in range(0, n_trials, batch_size)]
    args = (model, mu, mu_bar, n, dt, seed)
    kwargs = dict(under=under, boundaries=boundaries, snapshots=snapshots, n_inner=n_inner, f=f,
                  beta_kinds=tuple(beta_kinds), floor=floor, weight_by_noise_inverse=weight_by_noise_inverse)
    workers = min(thread_count(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _run_batch(*args, c, **kwargs), chunks))
    else:
        parts = [_run_batch(*args, c, **kwargs) for c in chunks]

    def cat(key):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts])

    return EnsembleResult(
        grid=grid,
        boundaries=boundaries,
        pi_mu=cat("pi_mu"),
        pi_bar=cat("pi_bar"),
        log_A=cat("log_A"),
        y_hat=cat("y_hat"),
        snapshots=snapshots,
        l1_error=cat("l1"),
        beta_integral={k: np.concatenate([p["beta"][k] for p in parts]) for k in beta_kinds},
        under=under,
    )
