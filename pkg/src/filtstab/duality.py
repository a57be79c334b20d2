"""Dual processes, martingale diagnostics and the stability bounds.

Deterministic checks (backward ODE, dissipation identity, stochastic
stability) are exact up to matrix-exponential accuracy.  The filter-side checks
are Monte Carlo estimates over ``run_ensemble`` trials; their tolerance is three
standard errors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .chain_core import (
    FilteringModel,
    Generator,
    as_probability,
    as_state_function,
    conditional_pi_constants,
    energy_form,
    invariant_measure,
    standard_pi_constant,
    variance,
)
from .ensemble import EnsembleResult, run_ensemble
from .simulate import default_dt, filter_batch, kolmogorov_forward, beta_values

N_SE = 3.0


class InsufficientTrialsError(ValueError):
    pass


@dataclass(frozen=True)
class BoundReport:
    """lhs <= rhs + tolerance, with provenance."""

    name: str
    lhs: float
    rhs: float
    tolerance: float = 0.0
    provenance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def verdict(self) -> bool:
        return bool(self.lhs <= self.rhs + self.tolerance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slack"] = self.slack
        d["verdict"] = self.verdict
        return d


@dataclass(frozen=True)
class MartingaleDiagnostic:
    """Zero-mean test: |increment_mean| <= 3 * standard_error + atol.

    ``role='finding'`` marks diagnostics that are reported but not required
    to pass.
    """

    label: str
    increment_mean: float
    standard_error: float
    n_trials: int
    atol: float = 0.0
    role: str = "check"

    @property
    def verdict(self) -> bool:
        return bool(abs(self.increment_mean) <= N_SE * self.standard_error + self.atol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


def mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


# --- deterministic dual ------------------------------------------------------

@dataclass(frozen=True)
class DualOdePath:
    grid: np.ndarray
    values: np.ndarray  # (n + 1, d), values[k] = y at grid[k]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]


def dual_backward_ode(A: Generator, yT, grid, block: int = 256) -> DualOdePath:
    """y_t = exp((T - t) A) y_T on the grid.

    On a uniform grid the powers P^0..P^block of the one-step propagator are
    formed once and applied a block at a time.
    """
    yT = as_state_function(yT, A.dim, "yT")
    grid = np.asarray(grid, dtype=float)
    n = len(grid) - 1
    vals = np.empty((n + 1, A.dim))
    vals[-1] = yT
    if n == 0:
        return DualOdePath(grid, vals)
    steps = np.diff(grid)
    if np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        b = min(block, n)
        powers = np.empty((b + 1, A.dim, A.dim))
        powers[0] = np.eye(A.dim)
        P = A.transition_matrix(steps[0])
        for j in range(b):
            powers[j + 1] = P @ powers[j]
        k = n
        while k > 0:
            m = min(b, k)
            vals[k - m:k + 1] = (powers[:m + 1] @ vals[k])[::-1]
            k -= m
        return DualOdePath(grid, vals)
    cache: dict[float, np.ndarray] = {}
    for k in range(n - 1, -1, -1):
        h = round(float(steps[k]), 15)
        if h not in cache:
            cache[h] = A.transition_matrix(h)
        vals[k] = cache[h] @ vals[k + 1]
    return DualOdePath(grid, vals)


def _dissipation_grid(A: Generator, T: float, n: int | None) -> np.ndarray:
    if n is None:
        rate = max(A.exit_rates.max(), 1e-12)
        n = max(2000, int(math.ceil(4000 * T * rate)))
    return np.linspace(0.0, T, n + 1)


def check_markov_variance_dissipation(A: Generator, mu_bar, yT, T: float = 1.0, grid=None,
                                      c: float | None = None, rel_tol: float = 1e-6) -> BoundReport:
    """var(y_0) <= e^{-cT} var(y_T), plus the identity var(y_0) + int enr(y_t) dt = var(y_T).

    The identity residual (trapezoid quadrature) is in ``details``.
    """
    mu_bar = as_probability(mu_bar, A.dim, "mu_bar")
    grid = _dissipation_grid(A, T, None) if grid is None else np.asarray(grid, dtype=float)
    T = float(grid[-1] - grid[0])
    path = dual_backward_ode(A, yT, grid)
    c = standard_pi_constant(A, mu_bar) if c is None else c
    var0 = variance(mu_bar, path.values[0])
    varT = variance(mu_bar, path.values[-1])
    L = energy_form(A, mu_bar)
    enr = np.einsum("ki,ij,kj->k", path.values, L, path.values)
    integral = float(trapezoid(enr, grid))
    residual = var0 + integral - varT
    scale = max(abs(varT), 1e-300)
    rel = abs(residual) / scale if varT > 0 else abs(residual)
    return BoundReport(
        name="markov_variance_dissipation",
        lhs=var0,
        rhs=math.exp(-c * T) * varT,
        tolerance=1e-12 * max(varT, 1.0),
        provenance={"T": T, "c": c, "grid_points": len(grid)},
        details={"var_y0": var0, "var_yT": varT, "energy_integral": integral, "identity_residual": residual,
                 "identity_relative_residual": rel, "identity_ok": bool(rel <= rel_tol)},
    )


def stochastic_stability_bound(A: Generator, mu_bar, mu0, f, T: float, c: float | None = None,
                               tol: float = 1e-10) -> BoundReport:
    """|pi_T^mu(f) - mubar(f)|^2 <= e^{-cT} var(gamma_0) var(f) for the Kolmogorov forward flow."""
    mu_bar = as_probability(mu_bar, A.dim, "mu_bar")
    if np.any(mu_bar <= 0):
        raise ValueError("mu_bar must be everywhere positive")
    mu0 = as_probability(mu0, A.dim, "mu0")
    f = as_state_function(f, A.dim)
    c = standard_pi_constant(A, mu_bar) if c is None else c
    piT = kolmogorov_forward(A, mu0, [0.0, T]).terminal
    gamma0 = mu0 / mu_bar
    gammaT = piT / mu_bar
    var_g0 = variance(mu_bar, gamma0)
    var_gT = variance(mu_bar, gammaT)
    decay = math.exp(-c * T)
    lhs = float((piT @ f - mu_bar @ f) ** 2)
    return BoundReport(
        name="stochastic_stability",
        lhs=lhs,
        rhs=decay * var_g0 * variance(mu_bar, f),
        tolerance=tol,
        provenance={"T": T, "c": c},
        details={"abs_error": math.sqrt(lhs), "var_gamma_T": var_gT, "var_gamma_0": var_g0,
                 "forward_variance_ok": bool(var_gT <= decay * var_g0 + tol),
                 "forward_variance_rhs": decay * var_g0},
    )


# --- filter ensembles ----------------------------------------------------------

@dataclass
class DualEnsembles:
    """Paired ensembles under P^mu and P^mubar sharing per-trial seeds."""

    under_mu: EnsembleResult
    under_mu_bar: EnsembleResult
    mu: np.ndarray
    mu_bar: np.ndarray
    T: float
    dt: float
    seed: int

    @property
    def n_trials(self) -> int:
        return self.under_mu.n_trials


def simulate_dual_ensembles(model: FilteringModel, mu, mu_bar, T: float, n_trials: int, seed: int = 0,
                            dt: float | None = None, n_windows: int = 4, n_inner: int = 1, f=None,
                            horizons=None, beta_kinds=("min_row",), **kwargs) -> DualEnsembles:
    mu = as_probability(mu, model.dim, "mu")
    mu_bar = as_probability(mu_bar, model.dim, "mu_bar")
    dt = default_dt(model.generator) if dt is None else dt
    common = dict(n_windows=n_windows, n_inner=n_inner, f=f, horizons=horizons, beta_kinds=beta_kinds, **kwargs)
    e_mu = run_ensemble(model, mu, mu_bar, T, dt, n_trials, seed, under="mu", **common)
    e_bar = run_ensemble(model, mu, mu_bar, T, dt, n_trials, seed, under="mu_bar", **common)
    return DualEnsembles(e_mu, e_bar, mu, mu_bar, T, dt, seed)


def _window_diagnostics(label, M, n_trials, role="check", times=None):
    out = []
    inc = np.diff(M, axis=1)
    for k in range(inc.shape[1]):
        m, se = mean_se(inc[:, k])
        window = f"[{times[k]:g},{times[k + 1]:g}]" if times is not None else f"[{k}]"
        out.append(MartingaleDiagnostic(f"{label}{window}", m, se, n_trials, role=role))
    return out


def prop3_diagnostics(model: FilteringModel, mu, mu_bar, T: float, n_trials: int, seed: int = 0,
                      dt: float | None = None, n_windows: int = 4, min_trials: int = 1000,
                      ensembles: DualEnsembles | None = None, include_gamma_candidate: bool = True,
                      normalisation_tol: float = 1e-10) -> list[MartingaleDiagnostic]:
    """Martingale diagnostics for the dual trajectory Y with Y_T = gamma_T.

    normalisation: max over trials and boundaries of |pibar_t(Y_t) - 1|.
    pi_mu(Y): increments of pi^mu_t(Y_t) under P^mu, one per window.
    A*pi_mu(Y): increments of A_t pi^mu_t(Y_t) under P^mubar.
    terminal: E^mu pi_T^mu(gamma_T) and E^mubar A_T pi_T^mu(gamma_T) against mu(Y_0).
    With ``include_gamma_candidate`` the same increments are reported for the
    naive choice Y_t = gamma_t as findings.
    """
    if n_trials < min_trials:
        raise InsufficientTrialsError(
            f"{n_trials} trials requested; at least {min_trials} are needed for 3-SE martingale tests")
    if ensembles is None:
        ensembles = simulate_dual_ensembles(model, mu, mu_bar, T, n_trials, seed, dt, n_windows, n_inner=1)
    e_mu, e_bar = ensembles.under_mu, ensembles.under_mu_bar
    if e_mu.y_hat is None or e_bar.y_hat is None:
        raise ValueError("ensembles were simulated without dual continuations (n_inner = 0)")
    mu = ensembles.mu
    N = e_mu.n_trials
    times = e_mu.times
    y_mu = e_mu.y_hat[:, :, 0]
    y_bar = e_bar.y_hat[:, :, 0]

    diags = []
    dev = max(np.abs(np.sum(e.pi_bar[:, :, None] * e.y_hat, axis=-1) - 1.0).max() for e in (e_mu, e_bar))
    diags.append(MartingaleDiagnostic("normalisation[pathwise]", float(dev), 0.0, 2 * N, atol=normalisation_tol))

    M3 = np.sum(e_mu.pi_mu * y_mu, axis=-1)
    diags += _window_diagnostics("pi_mu(Y)", M3, N, times=times)
    M4 = np.exp(e_bar.log_A) * np.sum(e_bar.pi_mu * y_bar, axis=-1)
    diags += _window_diagnostics("A*pi_mu(Y)", M4, N, times=times)

    # terminal identities against an independent estimate of mu(Y_0)
    m, se = mean_se(M3[:, -1] - y_mu[:, 0] @ mu)
    diags.append(MartingaleDiagnostic("terminal[pi_mu(Y)]", m, se, N))
    m, se = mean_se(M4[:, -1] - y_bar[:, 0] @ mu)
    diags.append(MartingaleDiagnostic("terminal[A*pi_mu(Y)]", m, se, N))

    if include_gamma_candidate:
        G3 = np.sum(e_mu.pi_mu**2 / e_mu.pi_bar, axis=-1)
        G4 = np.exp(e_bar.log_A) * np.sum(e_bar.pi_mu**2 / e_bar.pi_bar, axis=-1)
        diags += _window_diagnostics("pi_mu(gamma)", G3, N, role="finding", times=times)
        diags += _window_diagnostics("A*pi_mu(gamma)", G4, N, role="finding", times=times)
    return diags


def dual_initial_variance(ensembles: DualEnsembles) -> tuple[float, float, np.ndarray]:
    """Unbiased estimate of var_mubar(Y_0), its SE, and the estimate of Y_0.

    Every Yhat_0 sample is an iid draw (the continuation at t = 0 starts
    from mu_bar whatever the outer measure).
    """
    samples = np.concatenate([e.y_hat[:, 0].reshape(-1, e.y_hat.shape[-1])
                              for e in (ensembles.under_mu, ensembles.under_mu_bar)])
    w = ensembles.mu_bar
    n = samples.shape[0]
    D = samples - 1.0
    Dbar = D.mean(axis=0)
    s2 = D.var(axis=0, ddof=1)
    est = float(w @ (Dbar**2 - s2 / n))
    influence = (D - Dbar) @ (2.0 * w * Dbar)
    se = math.sqrt(influence.var(ddof=1) / n + float(w @ s2) ** 2 / n**2)
    return est, se, samples.mean(axis=0)


def check_backward_variance_inequality(model: FilteringModel, mu, mu_bar, T: float, n_trials: int, c: float,
                                       seed: int = 0, dt: float | None = None,
                                       ensembles: DualEnsembles | None = None,
                                       n_windows: int = 8) -> BoundReport:
    """var(Y_0) <= e^{-cT} var_T(gamma_T), Y the dual with terminal value gamma_T.

    ``details`` also carries the dissipation form
    var(Y_0) + int enr_t(Y_t) dt <= var_T(gamma_T), with the energy
    integrated by the trapezoid rule over the window boundaries.
    """
    if c <= 0:
        raise ValueError("c must be positive; without a positive constant use the beta-weighted form (check_beta_weighted_inequality)")
    if ensembles is None:
        ensembles = simulate_dual_ensembles(model, mu, mu_bar, T, n_trials, seed, dt, n_windows, n_inner=2)
    e_bar = ensembles.under_mu_bar
    var_y0, se_y0, y0 = dual_initial_variance(ensembles)
    var_T, se_T = mean_se(e_bar.S_T)
    decay = math.exp(-c * ensembles.T)
    lhs, rhs = var_y0, decay * var_T
    se = math.hypot(se_y0, decay * se_T)
    details = {"var_Y0": var_y0, "var_Y0_se": se_y0, "Y0": y0.tolist(), "var_T_gamma_T": var_T,
               "var_T_gamma_T_se": se_T}
    # the naive lhs var(gamma_0) obtained from Y_t = gamma_t, kept as a finding
    var_g0 = variance(ensembles.mu_bar, ensembles.mu / ensembles.mu_bar)
    details.update(gamma_candidate_lhs=var_g0, gamma_candidate_verdict=bool(var_g0 <= rhs + N_SE * se))
    if e_bar.y_hat is not None and e_bar.y_hat.shape[2] >= 2:
        details.update(_dissipation_form(model.generator, e_bar, var_y0, se_y0, var_T, se_T))
    return BoundReport(
        name="backward_variance_inequality",
        lhs=lhs,
        rhs=rhs,
        tolerance=N_SE * se,
        provenance={"T": ensembles.T, "c": c, "n_trials": ensembles.n_trials, "dt": ensembles.dt,
                    "seed": ensembles.seed},
        details=details,
    )


def _dissipation_form(A: Generator, e_bar: EnsembleResult, var_y0, se_y0, var_T, se_T) -> dict:
    off = A.off_diagonal()
    y1 = e_bar.y_hat[:, :, 0]
    y2 = e_bar.y_hat[:, :, 1]
    d1 = y1[..., :, None] - y1[..., None, :]
    d2 = y2[..., :, None] - y2[..., None, :]
    # product of two independent continuations: unbiased for Gamma(Y_t)
    per = np.einsum("nki,ij,nkij->nk", e_bar.pi_bar, off, d1 * d2)
    enr_int = trapezoid(per, e_bar.times, axis=1)
    m, se = mean_se(enr_int)
    lhs = var_y0 + m
    tol = N_SE * math.sqrt(se_y0**2 + se**2 + se_T**2)
    return {"energy_integral": m, "energy_integral_se": se, "dissipation_lhs": lhs, "dissipation_rhs": var_T,
            "dissipation_ok": bool(lhs <= var_T + tol), "dissipation_tolerance": tol}


def check_beta_weighted_inequality(model: FilteringModel, mu, mu_bar, T: float, n_trials: int,
                                   beta_kind: str = "min_row", seed: int = 0, dt: float | None = None,
                                   ensembles: DualEnsembles | None = None, n_windows: int = 4) -> BoundReport:
    """var(Y_0) <= E^mubar[exp(-int beta dt) V_T(gamma_T)] with beta along pi^mubar."""
    if ensembles is None:
        ensembles = simulate_dual_ensembles(model, mu, mu_bar, T, n_trials, seed, dt, n_windows, n_inner=1,
                                            beta_kinds=(beta_kind,))
    e_bar = ensembles.under_mu_bar
    if beta_kind not in e_bar.beta_integral:
        raise ValueError(f"ensembles lack beta kind {beta_kind!r}")
    var_y0, se_y0, _ = dual_initial_variance(ensembles)
    discount = np.exp(-e_bar.beta_integral[beta_kind])
    rhs, se_rhs = mean_se(discount * e_bar.S_T)
    mean_discount = float(discount.mean())
    return BoundReport(
        name=f"beta_weighted_inequality[{beta_kind}]",
        lhs=var_y0,
        rhs=rhs,
        tolerance=N_SE * math.hypot(se_y0, se_rhs),
        provenance={"T": ensembles.T, "beta_kind": beta_kind, "n_trials": ensembles.n_trials,
                    "dt": ensembles.dt, "seed": ensembles.seed},
        details={"mean_discount": mean_discount, "mean_beta_integral": float(e_bar.beta_integral[beta_kind].mean()),
                 "certifies_decay": bool(mean_discount < 1.0 - 1e-12), "var_Y0_se": se_y0, "rhs_se": se_rhs},
    )


def prior_ratio_bound(mu, mu_bar) -> float:
    """a = min_x mu_bar(x) / mu(x) over the support of mu."""
    mu = np.asarray(mu, dtype=float)
    mu_bar = np.asarray(mu_bar, dtype=float)
    support = mu > 0
    return float(np.min(mu_bar[support] / mu[support]))


@dataclass(frozen=True)
class RtEstimate:
    rt_part3: float
    rt_part3_se: float
    rt_part4: float
    rt_part4_se: float
    rt_lower_bound: float
    a: float
    unstable: bool
    n_trials: int
    E_mu_S: float
    E_mubar_S: float
    E_mubar_AS: float

    @property
    def verdict(self) -> bool | None:
        """rt_part3 >= a^2 - 3 SE, or None when the ratio is unstable."""
        if self.unstable:
            return None
        return bool(self.rt_part3 >= self.rt_lower_bound - N_SE * self.rt_part3_se)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


def _ratio_squared(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """(mean(num) / mean(den))^2 and its delta-method SE for paired samples."""
    n = len(num)
    r = num.mean() / den.mean()
    psi = (num - r * den) / den.mean()
    se_r = psi.std(ddof=1) / math.sqrt(n)
    return float(r**2), float(2 * abs(r) * se_r)


def rt_estimators(model: FilteringModel, mu, mu_bar, T: float, n_trials: int, seed: int = 0,
                  dt: float | None = None, ensembles: DualEnsembles | None = None) -> RtEstimate:
    if ensembles is None:
        ensembles = simulate_dual_ensembles(model, mu, mu_bar, T, n_trials, seed, dt, n_windows=1, n_inner=0)
    S_mu = ensembles.under_mu.S_T
    S_bar = ensembles.under_mu_bar.S_T
    AS = ensembles.under_mu_bar.A_T * S_bar
    a = prior_ratio_bound(ensembles.mu, ensembles.mu_bar)
    m_bar, se_bar = mean_se(S_bar)
    unstable = not (abs(m_bar) > se_bar) or m_bar == 0.0
    if unstable:
        r3 = r3se = r4 = r4se = float("nan")
    else:
        r3, r3se = _ratio_squared(S_mu, S_bar)
        r4, r4se = _ratio_squared(AS, S_bar)
    return RtEstimate(r3, r3se, r4, r4se, a**2, a, bool(unstable), len(S_mu), float(S_mu.mean()), m_bar,
                      float(AS.mean()))


@dataclass
class FilterStabilityResult:
    reports: list
    series_horizons: list   # L1 series, a superset of the report horizons
    l1_mean: list
    l1_se: list
    c: float
    a: float
    certified: bool

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports], "series_horizons": self.series_horizons,
                "l1_mean": self.l1_mean, "l1_se": self.l1_se, "c": self.c, "a": self.a,
                "certified": self.certified}


def filter_stability_bound(model: FilteringModel, mu, mu_bar, f, horizons, n_trials: int, c: float | None = None,
                           seed: int = 0, dt: float | None = None, series_horizons=None,
                           ensemble: EnsembleResult | None = None) -> FilterStabilityResult:
    """a^2 (E^mubar |pi_T^mu(f) - pi_T^mubar(f)|)^2 <= e^{-cT} var(gamma_0) var(f) at each horizon.

    All horizons are snapshots of one ensemble on [0, max(horizons)].  With no
    positive conditional PI constant nothing is certified and the rhs is nan.
    """
    mu = as_probability(mu, model.dim, "mu")
    mu_bar = as_probability(mu_bar, model.dim, "mu_bar")
    f = as_state_function(f, model.dim)
    horizons = sorted(float(h) for h in horizons)
    series = sorted(set(horizons) | set(float(h) for h in (series_horizons or ())))
    if c is None:
        c = conditional_pi_constants(model.generator, mu_bar).best_conditional()
    if ensemble is None:
        dt = default_dt(model.generator) if dt is None else dt
        ensemble = run_ensemble(model, mu, mu_bar, series[-1], dt, n_trials, seed, under="mu_bar",
                                n_windows=1, f=f, horizons=series)
    if ensemble.l1_error is None or ensemble.under != "mu_bar":
        raise ValueError("need an ensemble under P^mubar with a test function")
    snap_t = ensemble.grid[ensemble.snapshots]
    col = {h: int(np.argmin(np.abs(snap_t - h))) for h in series}
    if any(abs(snap_t[j] - h) > 1e-9 for h, j in col.items()):
        raise ValueError("ensemble snapshots do not cover the requested horizons")
    a = prior_ratio_bound(mu, mu_bar)
    var_g0 = variance(mu_bar, mu / mu_bar)
    var_f = variance(mu_bar, f)
    certified = c > 0
    stats = {h: mean_se(ensemble.l1_error[:, col[h]]) for h in series}
    reports = []
    for T in horizons:
        m, se = stats[T]
        reports.append(BoundReport(
            name=f"filter_stability[T={T:g}]",
            lhs=a**2 * m**2,
            rhs=math.exp(-c * T) * var_g0 * var_f if certified else float("nan"),
            tolerance=N_SE * 2 * a**2 * m * se,
            provenance={"T": T, "c": c, "a": a, "n_trials": ensemble.n_trials, "seed": seed},
            details={"l1_mean": m, "l1_se": se, "certified": certified},
        ))
    return FilterStabilityResult(reports, series, [stats[h][0] for h in series], [stats[h][1] for h in series],
                                 c, a, certified)


def ergodic_beta_average(model: FilteringModel, T: float, n_trials: int, seed: int = 0, dt: float = 1e-2,
                         kind: str = "min_row") -> dict:
    """Time average of beta along stationary filters, against sum_i mubar(i) min_j A(i, j)."""
    from .ensemble import sample_batch

    A = model.generator
    mu_bar = invariant_measure(A)
    trials = np.arange(n_trials)
    n = int(round(T / dt))
    _, inc = sample_batch(model, mu_bar, n, dt, seed, trials)
    traj = filter_batch(A, model.observation, inc, np.tile(mu_bar, (n_trials, 1)), dt)
    grid = np.arange(n + 1) * dt
    avg = trapezoid(beta_values(A, traj, kind), grid, axis=1) / T
    m, se = mean_se(avg)
    target = conditional_pi_constants(A, mu_bar).min_row_average
    return {"time_average": m, "standard_error": se, "target": target, "n_trials": n_trials, "T": T, "dt": dt,
            "verdict": bool(abs(m - target) <= N_SE * se)}
