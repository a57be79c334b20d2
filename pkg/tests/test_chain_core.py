import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import eigh
from scipy.optimize import minimize

from conftest import distributions, generators
from filtstab.chain_core import (
    FilteringModel,
    Generator,
    ModelError,
    ObservationModel,
    PiConstants,
    ReducibleGeneratorError,
    as_probability,
    carre_du_champ,
    conditional_pi_constants,
    energy,
    invariant_measure,
    is_everywhere_positive,
    load_model,
    model_from_dict,
    model_to_dict,
    standard_pi_constant,
    two_state,
    variance,
)


class TestValidation:
    def test_rejects_negative_rate(self):
        with pytest.raises(ModelError, match="negative off-diagonal"):
            Generator(np.array([[1.0, -1.0], [1.0, -1.0]]))

    def test_rejects_bad_row_sum(self):
        with pytest.raises(ModelError, match="sums to"):
            Generator(np.array([[-1.0, 1.0 + 1e-9], [1.0, -1.0]]))

    def test_row_sum_tolerance(self):
        Generator(np.array([[-1.0, 1.0 + 1e-13], [1.0, -1.0]]))

    def test_irreducibility(self, example1, cycle):
        assert example1.is_irreducible() and cycle.is_irreducible()
        red = Generator(np.array([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, -1.0]]))
        assert not red.is_irreducible()
        assert red.non_communicating_pair() is not None

    def test_non_spd_noise(self):
        with pytest.raises(ModelError, match="positive definite"):
            ObservationModel(np.ones((2, 1)), np.array([[0.0]]))
        with pytest.raises(ModelError, match="symmetric"):
            ObservationModel(np.ones((2, 2)), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_dim_mismatch(self, example1):
        with pytest.raises(ModelError):
            FilteringModel(example1, ObservationModel(np.ones((3, 1)), np.eye(1)))

    def test_probability(self):
        assert is_everywhere_positive(as_probability([0.5, 0.5]))
        assert not is_everywhere_positive([0.5, 0.5], floor=0.5)
        assert not is_everywhere_positive([1.0, 0.0])
        with pytest.raises(ModelError):
            as_probability([0.6, 0.6])
        with pytest.raises(ModelError):
            as_probability([1.1, -0.1])

    def test_model_round_trip(self, tmp_path, example1_model):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(model_to_dict(example1_model)))
        m = load_model(p)
        assert np.array_equal(m.generator.rates, example1_model.generator.rates)
        assert np.array_equal(m.observation.h, example1_model.observation.h)

    def test_model_defaults(self):
        m = model_from_dict({"dim": 2, "rates": [[-1, 1], [1, -1]]})
        assert m.observation.h.shape == (2, 1) and np.all(m.observation.h == 0)
        with pytest.raises(ModelError, match="missing"):
            model_from_dict({"dim": 2})


class TestInvariantMeasure:
    def test_two_state(self, example1):
        assert np.allclose(invariant_measure(example1), [2 / 3, 1 / 3], atol=1e-14)

    def test_cycle(self, cycle):
        assert np.allclose(invariant_measure(cycle), 0.25, atol=1e-14)

    def test_symmetric(self):
        assert np.allclose(invariant_measure(two_state(3.0, 3.0)), 0.5)

    def test_reducible_names_pair(self):
        red = Generator(np.array([[-1.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ReducibleGeneratorError, match="not reachable"):
            invariant_measure(red)

    @given(generators())
    def test_stationary(self, A):
        mu = invariant_measure(A)
        assert np.all(mu > 0) and abs(mu.sum() - 1) < 1e-12
        assert np.abs(mu @ A.rates).max() < 1e-10 * max(1.0, np.abs(A.rates).max())


class TestFunctionals:
    def test_carre_du_champ(self, example1, cycle):
        assert np.allclose(carre_du_champ(example1, [1, 0]), [1, 2])
        assert np.allclose(carre_du_champ(cycle, [1, 1, -1, -1]), [0, 4, 0, 4])
        assert np.allclose(carre_du_champ(cycle, [3, 3, 3, 3]), 0)

    def test_energy_variance(self, example1, cycle):
        assert energy(np.full(4, 0.25), cycle, [1, 1, -1, -1]) == pytest.approx(2.0)
        assert variance(np.full(4, 0.25), [1, 1, -1, -1]) == pytest.approx(1.0)
        mu = invariant_measure(example1)
        assert energy(mu, example1, [1, 0]) == pytest.approx(4 / 3)
        assert variance(mu, [1, 0]) == pytest.approx(2 / 9)
        assert energy(mu, example1, [2, 2]) == 0 and variance(mu, [2, 2]) == 0

    def test_dim_mismatch(self, example1):
        with pytest.raises(ModelError):
            carre_du_champ(example1, [1, 2, 3])


class TestStandardPi:
    @pytest.mark.parametrize("l1,l2", [(1, 2), (0.5, 0.5), (3, 0.1)])
    def test_two_state(self, l1, l2):
        A = two_state(l1, l2)
        assert standard_pi_constant(A, invariant_measure(A)) == pytest.approx(2 * (l1 + l2), rel=1e-12)

    def test_cycle(self, cycle):
        assert standard_pi_constant(cycle, np.full(4, 0.25)) == pytest.approx(2.0, abs=1e-12)

    def test_reducible_warns_zero(self):
        red = Generator(np.array([[-1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, -1.0]]))
        with pytest.warns(UserWarning, match="reducible"):
            assert standard_pi_constant(red, [0.0, 1.0, 0.0]) == 0.0

    @given(generators(max_dim=5))
    def test_against_random_search(self, A):
        mu = invariant_measure(A)
        c0 = standard_pi_constant(A, mu)
        rng = np.random.default_rng(0)
        F = rng.standard_normal((10_000, A.dim))
        diffs = F[:, :, None] - F[:, None, :]
        enr = np.einsum("i,ij,nij->n", mu, A.off_diagonal(), diffs**2)
        var = np.einsum("i,ni->n", mu, (F - F @ mu[:, None]) ** 2)
        ratios = enr / var
        assert np.all(ratios >= c0 * (1 - 1e-9))

        def rq(f):
            return energy(mu, A, f) / variance(mu, f)

        best = minimize(rq, F[np.argmin(ratios)], method="BFGS", options={"gtol": 1e-12})
        assert best.fun == pytest.approx(c0, rel=1e-6)

    @given(generators(max_dim=5))
    def test_minimiser_attains(self, A):
        mu = invariant_measure(A)
        c0 = standard_pi_constant(A, mu)
        W = mu[:, None] * A.off_diagonal()
        W = W + W.T
        L = np.diag(W.sum(1)) - W
        vals, vecs = eigh(L, np.diag(mu))
        f = vecs[:, 1]
        assert energy(mu, A, f) == pytest.approx(c0 * variance(mu, f), rel=1e-6)


class TestConditionalConstants:
    def test_example1(self, example1):
        c = conditional_pi_constants(example1, invariant_measure(example1))
        assert c.min_column_sum == pytest.approx(3.0, abs=1e-12)
        assert c.geometric_mean_min == pytest.approx(np.sqrt(2), abs=1e-12)
        assert c.doeblin == pytest.approx(2.0, abs=1e-12)
        assert c.min_row_average == pytest.approx(4 / 3, abs=1e-12)
        assert c.standard_c0 == pytest.approx(6.0, abs=1e-9)
        assert c.best_conditional() == pytest.approx(3.0)

    def test_cycle(self, cycle):
        c = conditional_pi_constants(cycle, np.full(4, 0.25))
        assert c.min_column_sum == c.geometric_mean_min == c.doeblin == c.min_row_average == 0.0
        assert c.best_conditional() == 0.0
        assert not any(c.certifies().values())

    def test_complete_graph(self):
        A = Generator(np.ones((3, 3)) - 3 * np.eye(3))
        c = conditional_pi_constants(A, invariant_measure(A))
        assert (c.min_column_sum, c.geometric_mean_min, c.doeblin, c.min_row_average) == pytest.approx((3, 1, 1, 1))

    def test_min_row_average_not_certifying(self):
        c = PiConstants(1.0, 0.0, 0.0, 0.0, 5.0)
        assert c.best_conditional() == 0.0

    @given(generators(max_dim=4), st.data())
    def test_conditional_pi_holds(self, A, data):
        """energy >= c * variance under any pi, for each certifying positive constant."""
        c = conditional_pi_constants(A, invariant_measure(A))
        pi = data.draw(distributions(A.dim))
        F = np.random.default_rng(1).standard_normal((200, A.dim))
        diffs = F[:, :, None] - F[:, None, :]
        enr = np.einsum("i,ij,nij->n", pi, A.off_diagonal(), diffs**2)
        var = np.einsum("i,ni->n", pi, (F - F @ pi[:, None]) ** 2)
        for name in c.CERTIFYING:
            v = getattr(c, name)
            if v > 0:
                assert np.all(enr >= v * var - 1e-9 * (1 + var)), name

    def test_example1_conditional_inequality(self, example1):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            pi = rng.dirichlet([1, 1])
            F = rng.standard_normal(2)
            assert energy(pi, example1, F) >= 3 * variance(pi, F) - 1e-12
