import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import distributions, generators
from filtstab.chain_core import FilteringModel, Generator, ObservationModel, invariant_measure
from filtstab.duality import (
    BoundReport,
    InsufficientTrialsError,
    MartingaleDiagnostic,
    check_backward_variance_inequality,
    check_beta_weighted_inequality,
    check_markov_variance_dissipation,
    dual_backward_ode,
    filter_stability_bound,
    prior_ratio_bound,
    prop3_diagnostics,
    rt_estimators,
    simulate_dual_ensembles,
    stochastic_stability_bound,
)
from filtstab.simulate import kolmogorov_forward

MU = np.array([0.9, 0.1])
MU_BAR = np.array([2 / 3, 1 / 3])


class TestReports:
    def test_bound_verdict(self):
        assert BoundReport("x", 1.0, 1.0).verdict
        assert not BoundReport("x", 1.0 + 1e-9, 1.0).verdict
        r = BoundReport("x", 1.5, 1.0, tolerance=0.5)
        assert r.verdict and r.slack == -0.5
        assert json.loads(json.dumps(r.to_dict()))["verdict"] is True

    def test_martingale_verdict(self):
        assert MartingaleDiagnostic("p", 0.3, 0.1, 100).verdict
        assert not MartingaleDiagnostic("p", -0.31, 0.1, 100).verdict
        assert MartingaleDiagnostic("p", 1e-11, 0.0, 1, atol=1e-10).verdict


class TestDualOde:
    def test_constant(self, example1):
        path = dual_backward_ode(example1, [1.0, 1.0], np.linspace(0, 2, 11))
        assert np.allclose(path.values, 1.0, atol=1e-14)

    def test_terminal_value(self, cycle):
        yT = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.array_equal(dual_backward_ode(cycle, yT, np.linspace(0, 1, 5)).values[-1], yT)

    def test_two_state_closed_form(self, example1):
        T = 0.7
        y0 = dual_backward_ode(example1, [1.0, 0.0], np.linspace(0, T, 8)).initial
        e = np.exp(-3 * T)
        assert np.allclose(y0, [2 / 3 + e / 3, 2 / 3 - 2 * e / 3], atol=1e-10)

    def test_ode_residual(self, example1):
        grid = np.linspace(0, 1, 1001)
        v = dual_backward_ode(example1, [1.0, -1.0], grid).values
        # -dy/dt = A y, central differences
        dy = (v[2:] - v[:-2]) / (2 * grid[1])
        assert np.abs(-dy - v[1:-1] @ example1.rates.T).max() < 1e-4

    @given(generators(), st.data())
    def test_duality_and_invariance(self, A, data):
        mu0 = data.draw(distributions(A.dim))
        yT = np.random.default_rng(0).standard_normal(A.dim)
        grid = np.linspace(0, 1.3, 14)
        y = dual_backward_ode(A, yT, grid).values
        pis = kolmogorov_forward(A, mu0, grid).distributions
        assert np.abs(np.sum(pis * y, axis=1) - mu0 @ y[0]).max() < 1e-10
        mu_bar = invariant_measure(A)
        assert mu_bar @ y[0] == pytest.approx(mu_bar @ yT, abs=1e-10)


class TestMarkovDissipation:
    def test_constant(self, example1):
        r = check_markov_variance_dissipation(example1, MU_BAR, [2.0, 2.0], 1.0)
        assert abs(r.lhs) < 1e-24 and abs(r.details["energy_integral"]) < 1e-12
        assert abs(r.details["identity_residual"]) < 1e-12 and r.verdict

    def test_two_state(self, example1):
        r = check_markov_variance_dissipation(example1, MU_BAR, [1.0, 0.0], 1.0)
        assert r.details["identity_ok"] and abs(r.details["identity_residual"]) <= 1e-6 * r.details["var_yT"]
        assert r.provenance["c"] == pytest.approx(6.0)
        assert r.verdict

    def test_random_terminal(self, example1):
        rng = np.random.default_rng(4)
        for _ in range(100):
            assert check_markov_variance_dissipation(example1, MU_BAR, rng.standard_normal(2), 0.8).verdict

    @given(generators(max_dim=6))
    @settings(max_examples=20)
    def test_random_models(self, A):
        mu_bar = invariant_measure(A)
        r = check_markov_variance_dissipation(A, mu_bar, np.random.default_rng(1).standard_normal(A.dim), 0.5)
        assert r.verdict and r.details["identity_ok"]


class TestStochasticStability:
    def test_stationary_start(self, example1):
        r = stochastic_stability_bound(example1, MU_BAR, MU_BAR, [1.0, 0.0], 1.0)
        assert r.lhs == pytest.approx(0, abs=1e-30) and r.rhs == pytest.approx(0, abs=1e-30) and r.verdict

    def test_two_state_rate(self, example1):
        Ts = [0.1, 0.5, 1.0, 2.0, 5.0]
        reps = [stochastic_stability_bound(example1, MU_BAR, [0.99, 0.01], [1.0, 0.0], T) for T in Ts]
        assert all(r.verdict and r.details["forward_variance_ok"] for r in reps)
        slope = np.polyfit(Ts, np.log([r.lhs for r in reps]), 1)[0]
        assert slope == pytest.approx(-6.0, abs=1e-6)

    def test_cycle(self, cycle):
        r = stochastic_stability_bound(cycle, np.full(4, 0.25), [0.7, 0.1, 0.1, 0.1], [1.0, 0.0, 2.0, -1.0], 3.0)
        assert r.provenance["c"] == pytest.approx(2.0) and r.verdict

    def test_zero_entry(self):
        A = Generator(np.array([[-1.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="positive"):
            stochastic_stability_bound(A, [0.0, 1.0], [0.5, 0.5], [1.0, 0.0], 1.0)

    @given(generators(max_dim=5), st.data(), st.floats(0.01, 3.0))
    def test_holds(self, A, data, T):
        mu0 = data.draw(distributions(A.dim))
        f = np.random.default_rng(2).standard_normal(A.dim)
        assert stochastic_stability_bound(A, invariant_measure(A), mu0, f, T).verdict


@pytest.fixture(scope="module")
def small_ensembles():
    A = Generator(np.array([[-1.0, 1.0], [2.0, -2.0]]))
    model = FilteringModel(A, ObservationModel(np.array([[1.0], [0.0]]), np.eye(1)))
    return model, simulate_dual_ensembles(model, MU, MU_BAR, 1.0, 1000, seed=11, dt=1e-2, n_windows=4,
                                          n_inner=2, beta_kinds=("min_row", "exact_rayleigh"))


class TestProp3:
    def test_checks_pass(self, small_ensembles):
        model, E = small_ensembles
        diags = prop3_diagnostics(model, MU, MU_BAR, 1.0, 1000, ensembles=E)
        checks = [d for d in diags if d.role == "check"]
        assert len(checks) == 1 + 4 + 4 + 2
        assert all(d.verdict for d in checks), [d.to_dict() for d in checks if not d.verdict]
        assert checks[0].increment_mean <= 1e-10

    def test_gamma_candidate_is_biased(self, small_ensembles):
        """Y_t = gamma_t is not the dual: its first-window increment is far from zero."""
        model, E = small_ensembles
        found = [d for d in prop3_diagnostics(model, MU, MU_BAR, 1.0, 1000, ensembles=E) if d.role == "finding"]
        assert found and not found[0].verdict
        assert found[0].increment_mean < -10 * found[0].standard_error

    def test_trivial_when_priors_agree(self, example1_model):
        diags = prop3_diagnostics(example1_model, MU_BAR, MU_BAR, 0.5, 1000, dt=1e-2, n_windows=2)
        for d in diags:
            assert abs(d.increment_mean) < 1e-12

    def test_needs_trials(self, example1_model):
        with pytest.raises(InsufficientTrialsError, match="at least 1000"):
            prop3_diagnostics(example1_model, MU, MU_BAR, 1.0, 999)


class TestBackwardInequalities:
    def test_backward(self, small_ensembles):
        model, E = small_ensembles
        r = check_backward_variance_inequality(model, MU, MU_BAR, 1.0, 1000, c=3.0, ensembles=E)
        assert r.verdict and r.details["dissipation_ok"]
        assert r.details["gamma_candidate_lhs"] == pytest.approx(0.245)

    def test_needs_positive_c(self, example1_model):
        with pytest.raises(ValueError, match="beta-weighted"):
            check_backward_variance_inequality(example1_model, MU, MU_BAR, 1.0, 10, c=0.0)

    @pytest.mark.parametrize("kind", ["min_row", "exact_rayleigh"])
    def test_beta_weighted(self, small_ensembles, kind):
        model, E = small_ensembles
        r = check_beta_weighted_inequality(model, MU, MU_BAR, 1.0, 1000, kind, ensembles=E)
        assert r.verdict and r.details["certifies_decay"]

    def test_priors_agree(self, example1_model):
        E = simulate_dual_ensembles(example1_model, MU_BAR, MU_BAR, 0.5, 200, dt=1e-2, n_inner=2)
        r = check_backward_variance_inequality(example1_model, MU_BAR, MU_BAR, 0.5, 200, 3.0, ensembles=E)
        # Y is identically one; its variance estimate is zero up to Monte Carlo noise
        assert r.rhs == 0 and abs(r.lhs) <= r.tolerance and r.verdict

    def test_cycle_beta_does_not_certify(self, cycle):
        model = FilteringModel(cycle, ObservationModel(np.array([[1.0], [0.0], [1.0], [0.0]]), np.eye(1)))
        r = check_beta_weighted_inequality(model, [0.7, 0.1, 0.1, 0.1], np.full(4, 0.25), 1.0, 300,
                                           "min_row", dt=1e-2)
        assert r.details["mean_discount"] == 1.0 and not r.details["certifies_decay"]
        assert r.verdict


class TestRt:
    def test_prior_ratio(self):
        assert prior_ratio_bound([0.5, 0.5], [2 / 3, 1 / 3]) == pytest.approx(2 / 3)

    def test_lower_bound_exact(self, example1_model):
        r = rt_estimators(example1_model, [0.5, 0.5], MU_BAR, 0.5, 500, dt=1e-2)
        assert r.rt_lower_bound == pytest.approx(4 / 9, abs=1e-15)

    def test_priors_agree_unstable(self, example1_model):
        r = rt_estimators(example1_model, MU_BAR, MU_BAR, 0.5, 200, dt=1e-2)
        assert r.unstable and r.verdict is None and r.a == 1.0

    def test_random_models(self):
        rng = np.random.default_rng(3)
        for i in range(10):
            d = rng.integers(2, 5)
            off = rng.uniform(0.2, 2.0, (d, d))
            np.fill_diagonal(off, 0)
            A = Generator(off - np.diag(off.sum(1)))
            model = FilteringModel(A, ObservationModel(rng.standard_normal((d, 1)), np.eye(1)))
            mu = rng.dirichlet(np.ones(d))
            r = rt_estimators(model, mu, invariant_measure(A), 0.5, 1000, seed=i, dt=1e-2)
            assert r.unstable or r.verdict, r.to_dict()


class TestFilterStabilityBound:
    def test_bound_and_monotone_rhs(self, example1_model):
        res = filter_stability_bound(example1_model, MU, MU_BAR, [1.0, 0.0], [0.5, 1.0, 2.0], 500, dt=1e-2,
                                     series_horizons=[0.25, 1.5])
        assert res.certified and res.c == pytest.approx(3.0)
        assert all(r.verdict for r in res.reports)
        rhs = [r.rhs for r in res.reports]
        assert all(b <= a for a, b in zip(rhs, rhs[1:]))
        assert res.series_horizons == [0.25, 0.5, 1.0, 1.5, 2.0]

    def test_priors_agree(self, example1_model):
        res = filter_stability_bound(example1_model, MU_BAR, MU_BAR, [1.0, 0.0], [1.0], 100, dt=1e-2)
        assert res.reports[0].lhs == 0 and res.reports[0].verdict

    def test_cycle_not_certified(self, cycle):
        model = FilteringModel(cycle, ObservationModel(np.array([[1.0], [0.0], [1.0], [0.0]]), np.eye(1)))
        res = filter_stability_bound(model, [0.7, 0.1, 0.1, 0.1], np.full(4, 0.25), [1, 1, -1, -1], [1.0], 100,
                                     dt=1e-2)
        assert not res.certified and not res.reports[0].verdict
