"""Entropy-weighted teacher mixing: closed form vs numeric minimizer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seca.errors import ConfigError
from seca.theory import (
    closed_form_weights,
    numeric_minimize,
    surrogate_objective,
)

# Frozen instance: rng(20260822) uniforms, normalized to the simplex.
SUM_LOSSES = [
    2.8254805670556333,
    0.9849595368942543,
    3.7700342689698934,
    1.2300133747750719,
    1.2857741340606799,
    0.5265089341576429,
]
SUM_ALPHA = [
    0.0548561740735383,
    0.09485591699588015,
    0.28504018819324095,
    0.22580699855389552,
    0.1263961792914094,
    0.21304454289203567,
]
SUM_TAU = 0.7
SUM_OBJECTIVE = 0.7083564376249016

# L = [0, 10] at tau = 1: weights softmax(-L), objective -log(1 + e^-10).
GAP_WEIGHTS = [0.9999546021312976, 4.5397868702434395e-05]
GAP_OBJECTIVE = -4.5398899216820676e-05


class TestObjective:
    def test_frozen_summation(self):
        got = surrogate_objective(SUM_ALPHA, SUM_LOSSES, SUM_TAU)
        assert got == pytest.approx(SUM_OBJECTIVE, abs=1e-12)

    def test_uniform_weights(self):
        # At uniform alpha the entropy term is exactly -tau ln n.
        L = np.array([1.0, 2.0, 3.0, 4.0])
        alpha = np.full(4, 0.25)
        expected = L.mean() - 2.0 * np.log(4.0)
        assert surrogate_objective(alpha, L, 2.0) == pytest.approx(expected, abs=1e-12)

    def test_one_hot_weights(self):
        # 0 log 0 contributes nothing, so a vertex scores exactly L_j.
        L = [3.5, 1.25, 8.0]
        assert surrogate_objective([0.0, 1.0, 0.0], L, 1.0) == 1.25

    def test_rejects_bad_tau(self):
        with pytest.raises(ConfigError):
            surrogate_objective([1.0], [1.0], 0.0)

    def test_rejects_off_simplex(self):
        with pytest.raises(ValueError):
            surrogate_objective([0.7, 0.7], [1.0, 2.0], 1.0)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            surrogate_objective([0.5, 0.5], [1.0, 2.0, 3.0], 1.0)


class TestClosedForm:
    def test_gap_instance(self):
        got = closed_form_weights([0.0, 10.0], 1.0)
        np.testing.assert_allclose(got, GAP_WEIGHTS, atol=1e-15)
        obj = surrogate_objective(got, [0.0, 10.0], 1.0)
        assert obj == pytest.approx(GAP_OBJECTIVE, abs=1e-12)

    def test_equal_losses_give_uniform(self):
        got = closed_form_weights([2.0, 2.0, 2.0], 0.5)
        np.testing.assert_allclose(got, [1 / 3] * 3, atol=1e-15)

    def test_monotone_in_losses(self):
        # Strictly smaller loss -> strictly larger weight.
        L = np.array([0.3, 1.1, 0.9, 2.4])
        w = closed_form_weights(L, 1.0)
        order = np.argsort(L)
        assert all(w[order[i]] > w[order[i + 1]] for i in range(3))

    def test_high_temperature_flattens(self):
        w = closed_form_weights([0.0, 1.0, 2.0], 1e6)
        np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-5)

    def test_low_temperature_concentrates(self):
        # Loss gap 0.1 at tau 1e-4 leaves the runner-up weight below 1e-6.
        w = closed_form_weights([0.5, 0.6, 1.0], 1e-4)
        assert abs(w[0] - 1.0) < 1e-6
        assert w[1] < 1e-6 and w[2] < 1e-6

    def test_extreme_losses_stay_finite(self):
        w = closed_form_weights([0.0, 5000.0], 1.0)
        assert np.all(np.isfinite(w))
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_beats_random_probes(self):
        # The closed form must lower-bound the surrogate everywhere we look.
        rng = np.random.default_rng(7)
        L = rng.uniform(0.0, 4.0, size=5)
        tau = 0.9
        star = closed_form_weights(L, tau)
        best = surrogate_objective(star, L, tau)
        for _ in range(10_000):
            probe = rng.dirichlet(np.ones(5))
            assert best <= surrogate_objective(probe, L, tau) + 1e-9
        for j in range(5):
            vertex = np.zeros(5)
            vertex[j] = 1.0
            assert best <= surrogate_objective(vertex, L, tau) + 1e-9
        assert best <= surrogate_objective(np.full(5, 0.2), L, tau) + 1e-9


class TestNumericMinimize:
    @pytest.mark.parametrize("tau", [0.1, 1.0, 10.0])
    def test_matches_closed_form(self, tau):
        rng = np.random.default_rng(int(tau * 10))
        for _ in range(5):
            L = rng.uniform(0.0, 3.0, size=7)
            got = numeric_minimize(L, tau, tol=1e-12)
            want = closed_form_weights(L, tau)
            assert np.abs(got - want).max() <= 1e-6

    def test_profits_from_gap_instance(self):
        got = numeric_minimize([0.0, 10.0], 1.0, tol=1e-12)
        assert np.abs(got - np.asarray(GAP_WEIGHTS)).max() <= 1e-6

    def test_iteration_cap_raises(self):
        from seca.errors import ConvergenceError

        with pytest.raises(ConvergenceError):
            numeric_minimize([0.0, 1.0, 2.0], 0.5, iters=2, tol=1e-14)

    def test_rejects_negative_losses(self):
        with pytest.raises(ValueError):
            numeric_minimize([-1.0, 2.0], 1.0)


@settings(max_examples=60, deadline=None)
@given(
    losses=st.lists(
        st.floats(min_value=0.0, max_value=20.0, allow_nan=False),
        min_size=1,
        max_size=12,
    ),
    tau=st.floats(min_value=1e-2, max_value=1e3),
)
def test_closed_form_is_simplex_point(losses, tau):
    w = closed_form_weights(losses, tau)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
