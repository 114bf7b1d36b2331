"""
Unit tests for the numerical solvers.
"""

import numpy as np
import pytest
from scipy import special, stats

from error_handling import NumericalError, ValidationError
from model_core import trial_stream
from solvers import (
    cg_solve,
    inverse_mills_ratio,
    log_normal_cdf,
    minimize_accelerated,
    sample_truncated_normal,
    sample_truncated_normals,
)


class TestConjugateGradients:
    """Test cases for cg_solve."""

    def setup_method(self):
        rng = trial_stream(3, 0)
        m = rng.standard_normal((20, 20))
        self.spd = m @ m.T + 20.0 * np.eye(20)
        self.rhs = rng.standard_normal(20)

    def test_matches_direct_solve(self):
        result = cg_solve(self.spd, self.rhs, tol=1e-12, max_iter=200)
        assert result.converged
        assert np.allclose(result.solution, np.linalg.solve(self.spd, self.rhs), atol=1e-9)
        assert result.residual <= 1e-12

    def test_accepts_callable_operator(self):
        result = cg_solve(lambda v: self.spd @ v, self.rhs, tol=1e-12, max_iter=200)
        assert np.allclose(result.solution, np.linalg.solve(self.spd, self.rhs), atol=1e-9)

    def test_diagonal_system_finishes_within_dimension(self):
        a = np.diag(np.arange(1.0, 6.0))
        result = cg_solve(a, np.ones(5), tol=1e-12, max_iter=50)
        assert result.converged
        assert result.iterations <= 6, f"Took {result.iterations} iterations"
        assert np.allclose(result.solution, 1.0 / np.arange(1.0, 6.0))

    def test_zero_right_hand_side(self):
        result = cg_solve(self.spd, np.zeros(20))
        assert result.converged
        assert result.iterations == 0
        assert not np.any(result.solution)

    def test_identity_takes_one_step(self):
        result = cg_solve(np.eye(20), self.rhs, tol=1e-12, max_iter=50)
        assert result.converged
        assert result.iterations == 1, f"Took {result.iterations} iterations"
        assert np.allclose(result.solution, self.rhs, rtol=0.0, atol=1e-14)

    def test_iteration_cap_reports_not_converged(self):
        result = cg_solve(np.diag(np.arange(1.0, 11.0)), np.ones(10), tol=1e-12, max_iter=1)
        assert not result.converged
        assert result.iterations == 1

    def test_indefinite_operator_raises(self):
        with pytest.raises(NumericalError):
            cg_solve(-np.eye(4), np.ones(4))

    def test_invalid_arguments(self):
        with pytest.raises(ValidationError):
            cg_solve(self.spd, self.rhs, tol=0.0)
        with pytest.raises(ValidationError):
            cg_solve(self.spd, self.rhs, max_iter=0)


class TestAcceleratedGradient:
    """Test cases for minimize_accelerated."""

    def test_quadratic_minimum(self):
        a = np.array([[3.0, 1.0], [1.0, 2.0]])
        b = np.array([1.0, -1.0])
        result = minimize_accelerated(
            lambda x: 0.5 * x @ a @ x - b @ x,
            lambda x: a @ x - b,
            np.zeros(2),
            tol=1e-10,
            step=1.0 / 4.0,
        )
        assert result.converged
        assert not result.diverged
        assert np.allclose(result.solution, np.linalg.solve(a, b), atol=1e-9)

    def test_backtracks_from_oversized_step(self):
        result = minimize_accelerated(
            lambda x: float(2.0 * x @ x), lambda x: 4.0 * x, np.ones(3), tol=1e-10, step=10.0,
            max_step=0.25,
        )
        assert result.converged
        assert np.allclose(result.solution, 0.0, atol=1e-9)

    def test_unbounded_objective_diverges(self):
        result = minimize_accelerated(
            lambda x: -float(np.sum(x)),
            lambda x: -np.ones_like(x),
            np.zeros(2),
            max_iter=10000,
            divergence_bound=100.0,
        )
        assert result.diverged
        assert np.linalg.norm(result.solution) > 100.0

    def test_non_finite_start_raises(self):
        with pytest.raises(NumericalError):
            minimize_accelerated(lambda x: np.inf, lambda x: x, np.zeros(1))


class TestLogNormalCdf:
    """Test cases for log Phi and the inverse Mills ratio."""

    def test_matches_direct_formula_in_bulk(self):
        t = np.linspace(-5.0, 5.0, 101)
        assert np.allclose(log_normal_cdf(t), np.log(special.ndtr(t)), rtol=1e-12, atol=1e-15)

    def test_lower_tail_is_finite(self):
        t = np.array([-40.0])
        expected = -0.5 * 40.0**2 - np.log(40.0 * np.sqrt(2.0 * np.pi))
        value = log_normal_cdf(t)[0]
        assert np.isfinite(value)
        assert value == pytest.approx(expected, abs=1e-3)

    def test_upper_tail_keeps_precision(self):
        assert log_normal_cdf(np.array([10.0]))[0] == pytest.approx(-special.ndtr(-10.0), rel=1e-6)

    def test_inverse_mills_ratio(self):
        t = np.linspace(-4.0, 4.0, 17)
        expected = stats.norm.pdf(t) / stats.norm.cdf(t)
        assert np.allclose(inverse_mills_ratio(t), expected, rtol=1e-10)
        assert inverse_mills_ratio(np.array([-40.0]))[0] == pytest.approx(40.0, rel=1e-3)


class TestTruncatedNormal:
    """Test cases for half-line truncated normal sampling."""

    def setup_method(self):
        self.rng = trial_stream(5, 0)

    def test_sides(self):
        means = np.array([0.0, 1.0, -1.0, 8.0, -8.0] * 200)
        lower = np.tile([True, False], 500)
        draws = sample_truncated_normals(means, lower, self.rng)
        assert np.all(draws[lower] < 0.0)
        assert np.all(draws[~lower] > 0.0)

    @pytest.mark.parametrize("mean", [0.0, 2.0, -3.0])
    def test_upper_mean(self, mean):
        draws = sample_truncated_normals(np.full(20000, mean), np.zeros(20000, bool), self.rng)
        expected = mean + stats.norm.pdf(mean) / stats.norm.cdf(mean)
        assert draws.mean() == pytest.approx(expected, abs=0.03)

    def test_deep_tails(self):
        far = sample_truncated_normals(np.full(2000, -8.0), np.zeros(2000, bool), self.rng)
        assert np.all(np.isfinite(far)) and np.all(far > 0.0)
        # E[t | t > 8] - 8 is close to 1/8
        assert far.mean() == pytest.approx(0.12, abs=0.02)
        near = sample_truncated_normals(np.full(2000, 8.0), np.zeros(2000, bool), self.rng)
        assert near.mean() == pytest.approx(8.0, abs=0.1)

    def test_scalar_form(self):
        value = sample_truncated_normal(0.5, True, self.rng)
        assert isinstance(value, float)
        assert value < 0.0
