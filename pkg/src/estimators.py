"""
Estimators

The six estimators compared by the toolkit:

- L-MMSE: E^T C_ybar^(-1) y, solved with conjugate gradients
- LS: C_x E^+ y, via a QR factorization of E
- MAP: probit posterior mode by accelerated gradient descent
- ML: MAP with the prior removed, with a divergence flag for separable data
- Logit-MAP: MAP under the logistic noise model
- PM: posterior mean from the Albert-Chib Gibbs sampler

`fit_estimator` dispatches by `EstimatorId` and records wall time.
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Optional

import numpy as np
from scipy import linalg, special

from error_handling import EstimatorUnavailableError, NumericalError, ValidationError
from linearization import Linearization, linearize
from model_core import ObservationVector, ProbitProblem, cholesky_factor
from solvers import (
    cg_solve,
    inverse_mills_ratio,
    log_normal_cdf,
    minimize_accelerated,
    sample_truncated_normals,
)

logger = logging.getLogger("linprobit.estimators")

RANK_TOL = 1e-10
LOW_SAMPLE_COUNT = 100


class EstimatorId(Enum):
    """Estimator identifiers as used on the command line and in output files."""

    LMMSE = "lmmse"
    LS = "ls"
    MAP = "map"
    ML = "ml"
    LOGIT_MAP = "logit-map"
    PM = "pm"

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]

    @property
    def is_linear(self) -> bool:
        return self in (EstimatorId.LMMSE, EstimatorId.LS)

    @classmethod
    def parse(cls, text: str) -> "EstimatorId":
        try:
            return cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(e.value for e in cls)
            raise ValidationError(
                f"unknown estimator '{text}' (expected one of: {valid})",
                details={"estimator": text},
            )


_DISPLAY_NAMES = {
    EstimatorId.LMMSE: "L-MMSE",
    EstimatorId.LS: "LS",
    EstimatorId.MAP: "MAP",
    EstimatorId.ML: "ML",
    EstimatorId.LOGIT_MAP: "Logit-MAP",
    EstimatorId.PM: "PM",
}


class ReportFlag(Enum):
    NOT_CONVERGED = "not_converged"
    DIVERGED = "diverged"
    LOW_SAMPLES = "low_samples"


@dataclass(frozen=True)
class SolverConfig:
    """
    Iteration limits shared by the iterative estimators.

    The defaults are the full experimental scale: 20000 gradient iterations,
    tolerance 1e-10 and a Gibbs chain of 50000 samples after 20000 burn-in.
    """

    max_iter: int = 20000
    tol: float = 1e-10
    gibbs_samples: int = 50000
    gibbs_burn_in: int = 20000
    divergence_bound: float = 1e6

    def __post_init__(self):
        if not self.tol > 0.0:
            raise ValidationError("tol must be positive", details={"tol": self.tol})
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if self.gibbs_samples < 1:
            raise ValidationError("gibbs_samples must be positive")
        if self.gibbs_burn_in < 0:
            raise ValidationError("gibbs_burn_in must be nonnegative")
        if not self.divergence_bound > 0.0:
            raise ValidationError("divergence_bound must be positive")

    @classmethod
    def desk_scale(cls, **overrides) -> "SolverConfig":
        """Shortened Gibbs chain (5000 samples, 2000 burn-in) for quick runs."""
        settings = {"gibbs_samples": 5000, "gibbs_burn_in": 2000}
        settings.update(overrides)
        return cls(**settings)


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    """An estimate x-hat with solver diagnostics and warning flags."""

    estimate: np.ndarray
    estimator_id: EstimatorId
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    flags: FrozenSet[ReportFlag] = frozenset()

    def __post_init__(self):
        estimate = np.array(self.estimate, dtype=float).reshape(-1)
        if not np.all(np.isfinite(estimate)):
            raise NumericalError(
                f"{self.estimator_id.display_name} produced a non-finite estimate"
            )
        estimate.setflags(write=False)
        object.__setattr__(self, "estimate", estimate)
        object.__setattr__(self, "flags", frozenset(self.flags))

    @property
    def converged(self) -> bool:
        return ReportFlag.NOT_CONVERGED not in self.flags

    @property
    def diverged(self) -> bool:
        return ReportFlag.DIVERGED in self.flags


def estimator_availability(estimator_id: EstimatorId, problem: ProbitProblem) -> Optional[str]:
    """Return None if the estimator exists for `problem`, else the reason it does not."""
    if estimator_id == EstimatorId.LS and problem.m < problem.n:
        return f"LS estimator does not exist for M < N (M={problem.m}, N={problem.n})"
    if not estimator_id.is_linear and problem.smoothing > 0.0:
        return f"{estimator_id.display_name} is defined for binary observations only"
    return None


def _check_length(observation: ObservationVector, m: int) -> None:
    if len(observation) != m:
        raise ValidationError(
            f"observation has length {len(observation)}, expected {m}",
            details={"length": len(observation), "m": m},
        )


def lmmse_estimate(
    lin: Linearization,
    observation: ObservationVector,
    cfg: Optional[SolverConfig] = None,
) -> EstimatorReport:
    """L-MMSE estimate E^T q with C_ybar q = y solved by conjugate gradients."""
    cfg = cfg or SolverConfig()
    _check_length(observation, lin.m)
    solve = cg_solve(lin.obs_cov, observation.values, tol=cfg.tol, max_iter=cfg.max_iter)
    flags = set() if solve.converged else {ReportFlag.NOT_CONVERGED}
    return EstimatorReport(
        estimate=lin.e_matrix.T @ solve.solution,
        estimator_id=EstimatorId.LMMSE,
        diagnostics={"iterations": solve.iterations, "final_residual": solve.residual},
        flags=flags,
    )


@dataclass(frozen=True, eq=False)
class LeastSquaresOperator:
    """Thin QR factorization of a full-column-rank E, giving E^+ v = R^(-1) Q^T v."""

    q: np.ndarray
    r: np.ndarray
    condition: float

    @classmethod
    def factor(cls, e: np.ndarray) -> "LeastSquaresOperator":
        m, n = e.shape
        if m < n:
            raise EstimatorUnavailableError(
                f"LS estimator does not exist for M < N (M={m}, N={n})",
                details={"m": m, "n": n},
            )
        singular_values = linalg.svdvals(e)
        if singular_values[-1] <= RANK_TOL * singular_values[0]:
            raise EstimatorUnavailableError(
                "LS estimator does not exist: E is rank deficient",
                details={"singular_values": singular_values.tolist()},
            )
        q, r = linalg.qr(e, mode="economic")
        return cls(q=q, r=r, condition=float(singular_values[0] / singular_values[-1]))

    def pseudo_inverse_apply(self, v: np.ndarray) -> np.ndarray:
        return linalg.solve_triangular(self.r, self.q.T @ v, lower=False)


def ls_estimate(lin: Linearization, observation: ObservationVector) -> EstimatorReport:
    """LS estimate C_x E^+ y with E^+ = (E^T E)^(-1) E^T."""
    _check_length(observation, lin.m)
    operator = LeastSquaresOperator.factor(lin.e_matrix)
    return EstimatorReport(
        estimate=lin.prior_cov @ operator.pseudo_inverse_apply(observation.values),
        estimator_id=EstimatorId.LS,
        diagnostics={"condition": operator.condition},
    )


def whitened_design(problem: ProbitProblem) -> np.ndarray:
    """Rows of D scaled by 1 / sqrt([C_w]_mm); C_w must be diagonal."""
    if not problem.noise_is_diagonal():
        raise ValidationError(
            "MAP, ML and PM estimators require a diagonal noise covariance"
        )
    return problem.design / np.sqrt(np.diag(problem.noise_cov))[:, None]


class LinkLoss(Enum):
    PROBIT = "probit"
    LOGIT = "logit"


class BinaryRegressionObjective:
    """
    Negative log posterior (or likelihood) of a binary regression model.

        f(x) = sum_m loss(y_m d_m^T x) + 1/2 x^T P x

    with loss(t) = -log Phi(t) for the probit link and log(1 + exp(-t)) for
    the logistic link, and P the prior precision (zero for ML).
    """

    def __init__(
        self,
        design: np.ndarray,
        signs: np.ndarray,
        prior_precision: Optional[np.ndarray],
        loss: LinkLoss = LinkLoss.PROBIT,
    ):
        self.signed_design = np.asarray(signs, dtype=float)[:, None] * design
        self.prior_precision = prior_precision
        self.loss = loss

    @classmethod
    def for_problem(
        cls,
        problem: ProbitProblem,
        observation: ObservationVector,
        loss: LinkLoss = LinkLoss.PROBIT,
        with_prior: bool = True,
    ) -> "BinaryRegressionObjective":
        if not observation.is_binary:
            raise ValidationError("observations must be binary (+1/-1)")
        _check_length(observation, problem.m)
        precision = None
        if with_prior:
            precision = linalg.cho_solve((problem.prior_cholesky, True), np.eye(problem.n))
            precision = 0.5 * (precision + precision.T)
        return cls(whitened_design(problem), observation.values, precision, loss)

    def margins(self, x: np.ndarray) -> np.ndarray:
        return self.signed_design @ x

    def value(self, x: np.ndarray) -> float:
        t = self.margins(x)
        if self.loss == LinkLoss.PROBIT:
            total = -float(np.sum(log_normal_cdf(t)))
        else:
            total = float(np.sum(np.logaddexp(0.0, -t)))
        if self.prior_precision is not None:
            total += 0.5 * float(x @ self.prior_precision @ x)
        return total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        t = self.margins(x)
        if self.loss == LinkLoss.PROBIT:
            weights = inverse_mills_ratio(t)
        else:
            weights = special.expit(-t)
        grad = -(self.signed_design.T @ weights)
        if self.prior_precision is not None:
            grad = grad + self.prior_precision @ x
        return grad

    def lipschitz_bound(self) -> float:
        """Upper bound on the gradient's Lipschitz constant (loss curvature <= 1 or 1/4)."""
        curvature = 1.0 if self.loss == LinkLoss.PROBIT else 0.25
        bound = curvature * float(np.linalg.norm(self.signed_design, 2)) ** 2
        if self.prior_precision is not None:
            bound += float(np.linalg.eigvalsh(self.prior_precision)[-1])
        return bound


def _fit_objective(
    objective: BinaryRegressionObjective,
    n: int,
    cfg: SolverConfig,
    estimator_id: EstimatorId,
    divergence_bound: Optional[float] = None,
) -> EstimatorReport:
    step = 1.0 / max(objective.lipschitz_bound(), np.finfo(float).tiny)
    result = minimize_accelerated(
        objective.value,
        objective.gradient,
        np.zeros(n),
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        step=step,
        max_step=step,
        divergence_bound=divergence_bound,
    )
    flags = set()
    if not result.converged:
        flags.add(ReportFlag.NOT_CONVERGED)
    if result.diverged:
        flags.add(ReportFlag.DIVERGED)
    return EstimatorReport(
        estimate=result.solution,
        estimator_id=estimator_id,
        diagnostics={
            "iterations": result.iterations,
            "final_residual": result.gradient_norm,
            "objective": result.objective,
            "restarts": result.restarts,
        },
        flags=flags,
    )


def _require_hard_model(problem: ProbitProblem, estimator_id: EstimatorId) -> None:
    if problem.smoothing > 0.0:
        raise EstimatorUnavailableError(
            f"{estimator_id.display_name} is defined for binary observations only",
            details={"smoothing": problem.smoothing},
        )


def map_probit(
    problem: ProbitProblem, observation: ObservationVector, cfg: Optional[SolverConfig] = None
) -> EstimatorReport:
    """Probit posterior mode: argmin -sum log Phi(y_m d_m^T x) + 1/2 x^T C_x^(-1) x."""
    cfg = cfg or SolverConfig()
    _require_hard_model(problem, EstimatorId.MAP)
    objective = BinaryRegressionObjective.for_problem(problem, observation)
    report = _fit_objective(objective, problem.n, cfg, EstimatorId.MAP)
    if not report.converged:
        logger.warning(f"MAP did not converge in {cfg.max_iter} iterations")
    return report


def ml_probit(
    problem: ProbitProblem, observation: ObservationVector, cfg: Optional[SolverConfig] = None
) -> EstimatorReport:
    """
    Probit maximum-likelihood estimate.

    Linearly separable data has no finite minimizer; the fit is flagged as
    diverged when ||x|| passes `cfg.divergence_bound` or when every margin of the
    returned estimate is strictly positive.
    """
    cfg = cfg or SolverConfig()
    _require_hard_model(problem, EstimatorId.ML)
    objective = BinaryRegressionObjective.for_problem(problem, observation, with_prior=False)
    report = _fit_objective(
        objective, problem.n, cfg, EstimatorId.ML, divergence_bound=cfg.divergence_bound
    )
    if not report.diverged and np.all(objective.margins(report.estimate) > 0.0):
        report = EstimatorReport(
            estimate=report.estimate,
            estimator_id=EstimatorId.ML,
            diagnostics=report.diagnostics,
            flags=report.flags | {ReportFlag.DIVERGED},
        )
    if report.diverged:
        logger.warning(
            f"ML estimate diverged (||x|| = {np.linalg.norm(report.estimate):.3e}); "
            f"the observations are linearly separable"
        )
    return report


def map_logit(
    problem: ProbitProblem, observation: ObservationVector, cfg: Optional[SolverConfig] = None
) -> EstimatorReport:
    """Posterior mode under the logistic noise model."""
    cfg = cfg or SolverConfig()
    _require_hard_model(problem, EstimatorId.LOGIT_MAP)
    objective = BinaryRegressionObjective.for_problem(problem, observation, loss=LinkLoss.LOGIT)
    report = _fit_objective(objective, problem.n, cfg, EstimatorId.LOGIT_MAP)
    if not report.converged:
        logger.warning(f"Logit-MAP did not converge in {cfg.max_iter} iterations")
    return report


class GibbsSampler:
    """
    Albert-Chib data augmentation for the probit posterior.

    Alternates z_m | x, y_m ~ N(d_m^T x, 1) truncated to the half-line of y_m,
    and x | z ~ N(S D^T z, S) with S = (C_x^(-1) + D^T D)^(-1), using the
    whitened design D. The gain S D^T and the Cholesky factor of S are computed
    once per fit.
    """

    def __init__(self, problem: ProbitProblem):
        if not problem.noise_is_isotropic():
            raise ValidationError("PM estimator requires isotropic noise C_w = sigma_w^2 I")
        self.design = whitened_design(problem)
        prior_precision = linalg.cho_solve((problem.prior_cholesky, True), np.eye(problem.n))
        precision = prior_precision + self.design.T @ self.design
        precision_factor = cholesky_factor(0.5 * (precision + precision.T), "posterior precision")
        covariance = linalg.cho_solve((precision_factor, True), np.eye(problem.n))
        self.covariance_factor = cholesky_factor(
            0.5 * (covariance + covariance.T), "posterior covariance"
        )
        self.gain = linalg.cho_solve((precision_factor, True), self.design.T)

    def run(
        self,
        signs: np.ndarray,
        samples: int,
        burn_in: int,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Return the mean of `samples` draws of x kept after `burn_in` sweeps."""
        n = self.gain.shape[0]
        lower_tail = np.asarray(signs) < 0.0
        x = np.zeros(n)
        total = np.zeros(n)
        for sweep in range(burn_in + samples):
            z = sample_truncated_normals(self.design @ x, lower_tail, rng)
            x = self.gain @ z + self.covariance_factor @ rng.standard_normal(n)
            if sweep >= burn_in:
                total += x
        return total / samples


def pm_gibbs(
    problem: ProbitProblem,
    observation: ObservationVector,
    cfg: Optional[SolverConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> EstimatorReport:
    """Posterior mean E[x | y] estimated by Gibbs sampling."""
    cfg = cfg or SolverConfig()
    if rng is None:
        raise ValidationError("PM estimator needs a random stream")
    _require_hard_model(problem, EstimatorId.PM)
    if not observation.is_binary:
        raise ValidationError("observations must be binary (+1/-1)")
    _check_length(observation, problem.m)

    flags = set()
    diagnostics: Dict[str, Any] = {
        "samples_kept": cfg.gibbs_samples,
        "burn_in": cfg.gibbs_burn_in,
    }
    if cfg.gibbs_samples < LOW_SAMPLE_COUNT:
        flags.add(ReportFlag.LOW_SAMPLES)
        diagnostics["warning"] = (
            f"only {cfg.gibbs_samples} Gibbs samples kept; the posterior mean is noisy"
        )
        logger.warning(diagnostics["warning"])

    sampler = GibbsSampler(problem)
    estimate = sampler.run(observation.values, cfg.gibbs_samples, cfg.gibbs_burn_in, rng)
    return EstimatorReport(
        estimate=estimate, estimator_id=EstimatorId.PM, diagnostics=diagnostics, flags=flags
    )


def fit_estimator(
    estimator_id: EstimatorId,
    problem: ProbitProblem,
    observation: ObservationVector,
    cfg: Optional[SolverConfig] = None,
    rng: Optional[np.random.Generator] = None,
    lin: Optional[Linearization] = None,
) -> EstimatorReport:
    """
    Run one estimator on (problem, observation).

    `lin` may carry a precomputed linearization of `problem` for the linear
    estimators. The wall time is recorded as diagnostics["elapsed_s"].
    """
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    if estimator_id.is_linear:
        lin = lin if lin is not None else linearize(problem)
        if estimator_id == EstimatorId.LMMSE:
            report = lmmse_estimate(lin, observation, cfg)
        else:
            report = ls_estimate(lin, observation)
    elif estimator_id == EstimatorId.MAP:
        report = map_probit(problem, observation, cfg)
    elif estimator_id == EstimatorId.ML:
        report = ml_probit(problem, observation, cfg)
    elif estimator_id == EstimatorId.LOGIT_MAP:
        report = map_logit(problem, observation, cfg)
    else:
        report = pm_gibbs(problem, observation, cfg, rng)
    report.diagnostics["elapsed_s"] = time.perf_counter() - start
    return report
