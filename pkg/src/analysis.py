"""
MSE Analysis and SNR Sweeps

Closed-form MSE of the two linear estimators, Monte-Carlo MSE of any
estimator, and the synthetic SNR sweep.

Random streams in a sweep are keyed as follows (root = the configuration seed):

    (0,)                              design matrix, drawn once per configuration
    (1, trial)                        x and w of a trial, shared across SNR points
    (2, snr_index, trial, estimator)  the estimator's own randomness (Gibbs)

so the output never depends on the number of worker threads.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg

from error_handling import NumericalError, ValidationError, log_error, safe_execute
from estimators import (
    EstimatorId,
    EstimatorReport,
    LeastSquaresOperator,
    SolverConfig,
    estimator_availability,
    fit_estimator,
)
from linearization import Linearization, linearize
from model_core import (
    ObservationVector,
    ProbitProblem,
    SyntheticConfig,
    cholesky_factor,
    generate_design,
    sample_instance,
    trial_stream,
)

logger = logging.getLogger("linprobit.analysis")

CLOSED_FORM_TOL = 1e-8
MAX_FAILURE_RATE = 0.10
DESIGN_KEY = 0
SAMPLING_KEY = 1
ESTIMATOR_KEY = 2
ESTIMATOR_ORDER = list(EstimatorId)

EstimatorInvocation = Callable[
    [ObservationVector, np.random.Generator], Union[np.ndarray, EstimatorReport]
]


def lmmse_mse_closed_form(lin: Linearization, prior_cov: Optional[np.ndarray] = None) -> float:
    """
    tr(C_x - E^T C_ybar^(-1) E), via a Cholesky solve of C_ybar against E.

    Raises:
        NumericalError: the value leaves [-1e-8, tr(C_x) + 1e-8]
    """
    prior_cov = lin.prior_cov if prior_cov is None else np.asarray(prior_cov, dtype=float)
    if prior_cov.shape != (lin.n, lin.n):
        raise ValidationError("prior_cov does not match the linearization")
    factor = cholesky_factor(lin.obs_cov, "C_ybar")
    solved = linalg.cho_solve((factor, True), lin.e_matrix)
    trace = float(np.trace(prior_cov))
    value = trace - float(np.sum(lin.e_matrix * solved))
    if not (-CLOSED_FORM_TOL <= value <= trace + CLOSED_FORM_TOL):
        raise NumericalError(
            f"L-MMSE closed-form MSE {value:.6e} outside [0, tr(C_x) = {trace:.6e}]",
            details={"value": value, "trace": trace},
        )
    return min(max(value, 0.0), trace)


def ls_mse_closed_form(lin: Linearization, prior_cov: Optional[np.ndarray] = None) -> float:
    """
    tr(C_x E^+ C_ybar (E^+)^T C_x) - tr(C_x); may exceed tr(C_x).

    Raises:
        EstimatorUnavailableError: M < N or E rank deficient
        NumericalError: negative value beyond roundoff
    """
    prior_cov = lin.prior_cov if prior_cov is None else np.asarray(prior_cov, dtype=float)
    if prior_cov.shape != (lin.n, lin.n):
        raise ValidationError("prior_cov does not match the linearization")
    operator = LeastSquaresOperator.factor(lin.e_matrix)
    gain = prior_cov @ linalg.solve_triangular(operator.r, operator.q.T, lower=False)
    value = float(np.sum((gain @ lin.obs_cov) * gain)) - float(np.trace(prior_cov))
    if not np.isfinite(value) or value < -CLOSED_FORM_TOL:
        raise NumericalError(
            f"LS closed-form MSE {value:.6e} is negative", details={"value": value}
        )
    return max(value, 0.0)


@dataclass(frozen=True, eq=False)
class MseEstimate:
    """Mean squared error over the successful trials."""

    mean: float
    stderr: float
    trials: int
    failures: int
    squared_errors: np.ndarray


def summarize_errors(squared_errors: Sequence[float], failures: int, label: str) -> MseEstimate:
    """
    Mean and standard error of per-trial squared errors.

    Raises:
        NumericalError: more than 10% of the trials failed
    """
    errors = np.asarray(squared_errors, dtype=float)
    total = errors.size + failures
    if failures > MAX_FAILURE_RATE * total:
        raise NumericalError(
            f"{label}: {failures} of {total} trials failed; aborting",
            details={"failures": failures, "trials": total},
        )
    if errors.size < 2:
        raise NumericalError(f"{label}: fewer than two successful trials")
    return MseEstimate(
        mean=float(errors.mean()),
        stderr=float(errors.std(ddof=1) / np.sqrt(errors.size)),
        trials=int(errors.size),
        failures=int(failures),
        squared_errors=errors,
    )


def _estimate_of(result: Union[np.ndarray, EstimatorReport]) -> np.ndarray:
    if isinstance(result, EstimatorReport):
        if result.diverged:
            raise NumericalError(f"{result.estimator_id.display_name} estimate diverged")
        return result.estimate
    return np.asarray(result, dtype=float)


def estimator_invocation(
    estimator_id: EstimatorId,
    problem: ProbitProblem,
    cfg: Optional[SolverConfig] = None,
    lin: Optional[Linearization] = None,
) -> EstimatorInvocation:
    """Bind an estimator to `problem` for use with `empirical_mse`."""
    if estimator_id.is_linear and lin is None:
        lin = linearize(problem)

    def invoke(observation: ObservationVector, rng: np.random.Generator) -> EstimatorReport:
        return fit_estimator(estimator_id, problem, observation, cfg, rng, lin)

    return invoke


def empirical_mse(
    problem: ProbitProblem,
    estimator: EstimatorInvocation,
    trials: int,
    rng: np.random.Generator,
) -> MseEstimate:
    """
    Average ||x - x_hat||^2 over `trials` draws of the model.

    Each trial gets its own pair of streams (sampling, estimator) derived from
    `rng`. A failing or diverged estimator marks the trial as failed.
    """
    if trials < 2:
        raise ValidationError("empirical MSE needs at least 2 trials", details={"trials": trials})
    root = int(rng.integers(2**63))
    errors = []
    failures = 0
    for trial in range(trials):
        signal, observation = sample_instance(problem, trial_stream(root, trial, 0))

        def attempt():
            return _estimate_of(estimator(observation, trial_stream(root, trial, 1)))

        outcome = safe_execute(attempt)
        if outcome["success"]:
            errors.append(float(np.sum((signal - outcome["result"]) ** 2)))
        else:
            failures += 1
    return summarize_errors(errors, failures, "empirical MSE")


@dataclass(frozen=True)
class SweepResult:
    """One (configuration, SNR, estimator) row of a sweep."""

    m: int
    n: int
    snr_db: float
    estimator_id: EstimatorId
    trials: int
    available: bool = True
    mse_empirical_mean: Optional[float] = None
    mse_empirical_stderr: Optional[float] = None
    mse_closed_form: Optional[float] = None
    failures: Optional[int] = None
    elapsed_s: Optional[float] = None


@dataclass(frozen=True, eq=False)
class _TrialOutcome:
    errors: Dict[EstimatorId, float]
    elapsed: Dict[EstimatorId, float]
    failed: Dict[EstimatorId, str]


def _run_trial(
    snr_index: int,
    trial: int,
    seed: int,
    problem: ProbitProblem,
    lin: Optional[Linearization],
    estimators: Sequence[EstimatorId],
    cfg: SolverConfig,
) -> _TrialOutcome:
    signal, observation = sample_instance(problem, trial_stream(seed, SAMPLING_KEY, trial))
    outcome = _TrialOutcome(errors={}, elapsed={}, failed={})
    for estimator_id in estimators:
        rng = trial_stream(
            seed, ESTIMATOR_KEY, snr_index, trial, ESTIMATOR_ORDER.index(estimator_id)
        )
        try:
            report = fit_estimator(estimator_id, problem, observation, cfg, rng, lin)
            estimate = _estimate_of(report)
        except Exception as e:
            outcome.failed[estimator_id] = f"{type(e).__name__}: {e}"
            continue
        outcome.errors[estimator_id] = float(np.sum((signal - estimate) ** 2))
        outcome.elapsed[estimator_id] = float(report.diagnostics["elapsed_s"])
    return outcome


def _closed_form(estimator_id: EstimatorId, lin: Linearization) -> float:
    if estimator_id == EstimatorId.LMMSE:
        return lmmse_mse_closed_form(lin)
    return ls_mse_closed_form(lin)


def snr_sweep(
    base: SyntheticConfig,
    snr_grid_db: Sequence[float],
    estimators: Sequence[EstimatorId],
    trials: int,
    cfg: Optional[SolverConfig] = None,
    threads: int = 1,
    timing: bool = False,
) -> List[SweepResult]:
    """
    Empirical (and, for the linear estimators, closed-form) MSE across SNR.

    A single design matrix is drawn for `base`; every estimator sees the same
    (x, y) in each trial. Estimators that do not exist for the configuration
    (LS with M < N, non-linear estimators on smoothed observations) are emitted
    as absent rows.

    Returns:
        One SweepResult per (snr, estimator), in grid order then estimator order
    """
    if not snr_grid_db:
        raise ValidationError("SNR grid must not be empty")
    if trials < 2:
        raise ValidationError("a sweep needs at least 2 trials", details={"trials": trials})
    if threads < 1:
        raise ValidationError("threads must be at least 1", details={"threads": threads})
    cfg = cfg or SolverConfig()
    selected = sorted(set(estimators), key=ESTIMATOR_ORDER.index)

    design = generate_design(base.m, base.n, trial_stream(base.seed, DESIGN_KEY))
    points: List[Tuple[ProbitProblem, Optional[Linearization], List[EstimatorId]]] = []
    for snr_db in snr_grid_db:
        problem = base.with_snr(float(snr_db)).build_problem(design)
        active = [e for e in selected if estimator_availability(e, problem) is None]
        lin = linearize(problem) if any(e.is_linear for e in active) else None
        points.append((problem, lin, active))

    logger.info(
        f"Sweep M={base.m} N={base.n}: {len(snr_grid_db)} SNR points x {trials} trials, "
        f"estimators {[e.value for e in selected]}, {threads} thread(s)"
    )
    started = time.perf_counter()
    tasks = [
        delayed(_run_trial)(i, trial, base.seed, problem, lin, active, cfg)
        for i, (problem, lin, active) in enumerate(points)
        for trial in range(trials)
    ]
    outcomes = Parallel(n_jobs=threads, prefer="threads")(tasks)
    logger.info(f"Sweep M={base.m} N={base.n} finished in {time.perf_counter() - started:.1f}s")

    results = []
    for i, (snr_db, (problem, lin, active)) in enumerate(zip(snr_grid_db, points)):
        point_outcomes = outcomes[i * trials : (i + 1) * trials]
        for estimator_id in selected:
            results.append(
                _summarize_point(
                    base, float(snr_db), estimator_id, trials, problem, lin, active,
                    point_outcomes, timing,
                )
            )
    return results


def _summarize_point(
    base: SyntheticConfig,
    snr_db: float,
    estimator_id: EstimatorId,
    trials: int,
    problem: ProbitProblem,
    lin: Optional[Linearization],
    active: List[EstimatorId],
    outcomes: List[_TrialOutcome],
    timing: bool,
) -> SweepResult:
    if estimator_id not in active:
        logger.debug(f"SNR {snr_db} dB: {estimator_availability(estimator_id, problem)}")
        return SweepResult(
            m=base.m, n=base.n, snr_db=snr_db, estimator_id=estimator_id,
            trials=trials, available=False,
        )

    errors = [o.errors[estimator_id] for o in outcomes if estimator_id in o.errors]
    failures = [o.failed[estimator_id] for o in outcomes if estimator_id in o.failed]
    for reason in failures[:3]:
        logger.warning(f"{estimator_id.display_name} at {snr_db} dB: trial failed ({reason})")

    closed_form = None
    if estimator_id.is_linear:
        closed_form = _closed_form(estimator_id, lin)

    mean = stderr = elapsed = None
    try:
        summary = summarize_errors(
            errors, len(failures), f"{estimator_id.display_name} at {snr_db} dB"
        )
        mean, stderr = summary.mean, summary.stderr
        if timing:
            times = [o.elapsed[estimator_id] for o in outcomes if estimator_id in o.elapsed]
            elapsed = float(np.mean(times))
    except NumericalError as e:
        log_error(e, {"m": base.m, "n": base.n, "snr_db": snr_db})

    return SweepResult(
        m=base.m,
        n=base.n,
        snr_db=snr_db,
        estimator_id=estimator_id,
        trials=trials,
        mse_empirical_mean=mean,
        mse_empirical_stderr=stderr,
        mse_closed_form=closed_form,
        failures=len(failures),
        elapsed_s=elapsed,
    )
