"""
Bussgang Linearization of the (Smoothed) Probit Model

The observation y-bar = f_sigma(z), z = D x + w, is written as the linear model
y-bar = F x + e with a residual e uncorrelated with x. All quantities have
closed forms:

    C_z   = D C_x D^T + C_w
    E     = E[y-bar x^T] = sqrt(2/pi) diag(sigma^2 + gamma)^(-1/2) D C_x
    C_ybar = (2/pi) arcsin(diag(sigma^2 + gamma)^(-1/2) C_z diag(sigma^2 + gamma)^(-1/2))
    F     = E C_x^(-1)

with gamma_m = [C_z]_mm. The smoothing sigma = 0 case is the hard sign model.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from error_handling import CovarianceError, ValidationError
from model_core import ProbitProblem, sample_batch

logger = logging.getLogger("linprobit.linearization")

ARCSIN_TOL = 1e-10
RESIDUAL_MIN_TRIALS = 10_000
RESIDUAL_BATCH = 50_000


@dataclass(frozen=True, eq=False)
class Linearization:
    """The linearized model y-bar = F x + e of one ProbitProblem."""

    e_matrix: np.ndarray
    obs_cov: np.ndarray
    f_matrix: np.ndarray
    z_cov: np.ndarray
    prior_cov: np.ndarray
    smoothing: float = 0.0

    @property
    def m(self) -> int:
        return self.e_matrix.shape[0]

    @property
    def n(self) -> int:
        return self.e_matrix.shape[1]

    def with_scaled_e(self, factor: float) -> "Linearization":
        """Copy with E and F multiplied by `factor` (diagnostic perturbation)."""
        return replace(self, e_matrix=factor * self.e_matrix, f_matrix=factor * self.f_matrix)


def z_covariance_from(
    design: np.ndarray, prior_cov: np.ndarray, noise_cov: np.ndarray
) -> np.ndarray:
    """D C_x D^T + C_w for raw arrays (no design-row check)."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    c_z = design @ np.asarray(prior_cov, dtype=float) @ design.T + np.asarray(
        noise_cov, dtype=float
    )
    return 0.5 * (c_z + c_z.T)


def z_covariance(problem: ProbitProblem) -> np.ndarray:
    """Covariance of the noisy projections z = D x + w."""
    return z_covariance_from(problem.design, problem.prior_cov, problem.noise_cov)


def _row_scales(problem: ProbitProblem, c_z: np.ndarray) -> np.ndarray:
    return np.sqrt(problem.smoothing**2 + np.diag(c_z))


def e_matrix(problem: ProbitProblem) -> np.ndarray:
    """Cross-covariance E = E[y-bar x^T]; row m is sqrt(2/pi) C_x d_m / sqrt(sigma^2 + gamma_m)."""
    scales = _row_scales(problem, z_covariance(problem))
    return (np.sqrt(2.0 / np.pi) / scales)[:, None] * (problem.design @ problem.prior_cov)


def observation_covariance(problem: ProbitProblem) -> np.ndarray:
    """
    Arcsine law for the observation covariance C_ybar.

    Raises:
        CovarianceError: an arcsin argument leaves [-1 - 1e-10, 1 + 1e-10]
    """
    c_z = z_covariance(problem)
    scales = _row_scales(problem, c_z)
    rho = c_z / np.outer(scales, scales)
    excess = float(np.max(np.abs(rho))) - 1.0
    if excess > ARCSIN_TOL:
        raise CovarianceError(
            f"inconsistent covariance input: arcsin argument exceeds 1 by {excess:.3e}",
            details={"excess": excess},
        )
    c_ybar = (2.0 / np.pi) * np.arcsin(np.clip(rho, -1.0, 1.0))
    c_ybar = 0.5 * (c_ybar + c_ybar.T)
    if problem.smoothing == 0.0:
        np.fill_diagonal(c_ybar, 1.0)
    return c_ybar


def linearize(problem: ProbitProblem) -> Linearization:
    """Bundle C_z, E, C_ybar and F = E C_x^(-1) for `problem`."""
    c_z = z_covariance(problem)
    e = e_matrix(problem)
    c_ybar = observation_covariance(problem)
    # F^T = C_x^(-1) E^T through the prior's Cholesky factor
    f = linalg.cho_solve((problem.prior_cholesky, True), e.T).T
    return Linearization(
        e_matrix=e,
        obs_cov=c_ybar,
        f_matrix=f,
        z_cov=c_z,
        prior_cov=problem.prior_cov,
        smoothing=problem.smoothing,
    )


@dataclass(frozen=True, eq=False)
class ResidualCorrelation:
    """Monte-Carlo estimate of E[x e^T] with its entrywise standard error."""

    mean: np.ndarray
    stderr: np.ndarray
    trials: int

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.mean)))

    def within(self, n_stderr: float) -> bool:
        return bool(np.all(np.abs(self.mean) <= n_stderr * self.stderr + 1e-15))


def residual_correlation(
    problem: ProbitProblem,
    lin: Linearization,
    trials: int,
    rng: np.random.Generator,
) -> ResidualCorrelation:
    """
    Estimate E[x e^T] with e = y-bar - F x from `trials` draws of the model.

    Draws are processed in batches so memory stays bounded for 10^6 trials.
    """
    if trials < RESIDUAL_MIN_TRIALS:
        raise ValidationError(
            f"residual check needs at least {RESIDUAL_MIN_TRIALS} trials",
            details={"trials": trials},
        )
    if lin.f_matrix.shape != (problem.m, problem.n):
        raise ValidationError("linearization does not match the problem dimensions")

    total = np.zeros((problem.n, problem.m))
    total_sq = np.zeros((problem.n, problem.m))
    remaining = trials
    while remaining > 0:
        count = min(remaining, RESIDUAL_BATCH)
        signals, observations = sample_batch(problem, rng, count)
        residuals = observations - signals @ lin.f_matrix.T
        total += signals.T @ residuals
        total_sq += np.square(signals).T @ np.square(residuals)
        remaining -= count

    mean = total / trials
    variance = np.maximum(total_sq / trials - mean**2, 0.0) * trials / (trials - 1)
    return ResidualCorrelation(mean=mean, stderr=np.sqrt(variance / trials), trials=trials)


def residual_check(
    problem: ProbitProblem,
    lin: Linearization,
    trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Empirical E[x e^T] (N x M); near zero when F is the Bussgang gain."""
    result = residual_correlation(problem, lin, trials, rng)
    logger.debug(
        f"residual check: max |E[x e^T]| = {result.max_abs:.3e} over {trials} trials"
    )
    return result.mean
