"""
Self-Verification Suite

Runs the desk-scale property checks behind `linprobit verify`: closed forms
against Monte-Carlo, the arcsine law, orthogonality of the linearization
residual, gradient checks, solver sanity checks and the comparison of the
non-linear estimators (agreement at low SNR, lowest MSE for PM).

Monte-Carlo comparisons pass when the discrepancy is within 4 standard errors,
so the bands widen automatically when fewer trials are requested.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, special

from analysis import (
    empirical_mse,
    estimator_invocation,
    lmmse_mse_closed_form,
    ls_mse_closed_form,
    snr_sweep,
)
from error_handling import ConfigurationError, VerificationError, handle_error
from estimators import (
    BinaryRegressionObjective,
    EstimatorId,
    LeastSquaresOperator,
    LinkLoss,
    SolverConfig,
    lmmse_estimate,
    ls_estimate,
    map_probit,
)
from linearization import Linearization, linearize, residual_correlation
from model_core import (
    ObservationVector,
    ProbitProblem,
    SyntheticConfig,
    cholesky_factor,
    generate_design,
    sample_batch,
    trial_stream,
)
from reporting import ResultTable
from solvers import cg_solve, sample_truncated_normals

logger = logging.getLogger("linprobit.verification")

N_STDERR = 4.0
MIN_ORTHOGONALITY_TRIALS = 10_000
NEGATIVE_CONTROL_TRIALS = 10_000
MC_BATCH = 50_000
SABOTAGE_MODES = {"e-matrix-scale": 1.5}


@dataclass(frozen=True)
class VerifyContext:
    """Settings shared by every property check."""

    trials: int = 10_000
    seed: int = 0
    e_scale: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig.desk_scale)

    def stream(self, *key: int) -> np.random.Generator:
        return trial_stream(self.seed, *key)

    def linearize(self, problem: ProbitProblem) -> Linearization:
        lin = linearize(problem)
        return lin if self.e_scale == 1.0 else lin.with_scaled_e(self.e_scale)


@dataclass(frozen=True)
class PropertyOutcome:
    name: str
    passed: bool
    detail: str
    elapsed_s: float = 0.0


class CheckFailed(Exception):
    """Raised inside a check to report a failed property with a reason."""


def _within(value: float, target: float, stderr: float, label: str) -> str:
    band = N_STDERR * stderr + 1e-12
    if abs(value - target) > band:
        raise CheckFailed(
            f"{label}: {value:.6g} vs {target:.6g} (|diff| {abs(value - target):.3g} > {band:.3g})"
        )
    return f"{label}: |diff| {abs(value - target):.3g} <= {band:.3g}"


def _close(value: float, target: float, tol: float, label: str) -> None:
    if not abs(value - target) <= tol:
        raise CheckFailed(f"{label}: {value:.12g} vs {target:.12g} (tol {tol:g})")


def _problem(m: int, n: int, snr_db: float, key: int, ctx: VerifyContext, smoothing=0.0):
    config = SyntheticConfig(m=m, n=n, snr_db=snr_db, seed=ctx.seed, smoothing=smoothing)
    return config.build_problem(generate_design(m, n, ctx.stream(0, key)))


def _linear_mc(
    problem: ProbitProblem, gain: np.ndarray, trials: int, rng: np.random.Generator
) -> Tuple[float, float]:
    """MSE mean and stderr of the linear estimator x_hat = gain @ y."""
    errors = []
    remaining = trials
    while remaining > 0:
        count = min(remaining, MC_BATCH)
        signals, observations = sample_batch(problem, rng, count)
        errors.append(np.sum((signals - observations @ gain.T) ** 2, axis=1))
        remaining -= count
    errors = np.concatenate(errors)
    return float(errors.mean()), float(errors.std(ddof=1) / np.sqrt(errors.size))


def _lmmse_gain(lin: Linearization) -> np.ndarray:
    factor = cholesky_factor(lin.obs_cov, "C_ybar")
    return linalg.cho_solve((factor, True), lin.e_matrix).T


def _ls_gain(lin: Linearization) -> np.ndarray:
    operator = LeastSquaresOperator.factor(lin.e_matrix)
    return lin.prior_cov @ linalg.solve_triangular(operator.r, operator.q.T, lower=False)


MC_CASES = [(10, 5), (50, 5), (200, 5), (50, 20)]
MC_SNRS = [-10.0, 0.0, 10.0]


def check_scalar_anchors(ctx: VerifyContext) -> str:
    scalar = ProbitProblem.isotropic([[1.0]], 1.0, 1.0)
    lin = ctx.linearize(scalar)
    plus = ObservationVector.binary([1.0])
    _close(lmmse_estimate(lin, plus).estimate[0], 1.0 / np.sqrt(np.pi), 1e-10, "L-MMSE scalar")
    _close(ls_estimate(lin, plus).estimate[0], np.sqrt(np.pi), 1e-10, "LS scalar")
    _close(lmmse_mse_closed_form(lin), 1.0 - 1.0 / np.pi, 1e-10, "L-MMSE MSE scalar")
    _close(ls_mse_closed_form(lin), np.pi - 1.0, 1e-10, "LS MSE scalar")

    pair = ProbitProblem.isotropic([[1.0], [1.0]], 1.0, 1.0)
    lin = ctx.linearize(pair)
    estimate = lmmse_estimate(lin, ObservationVector.binary([1.0, 1.0])).estimate[0]
    _close(estimate, 1.5 / np.sqrt(np.pi), 1e-10, "L-MMSE two measurements")
    _close(lmmse_mse_closed_form(lin), 1.0 - 1.5 / np.pi, 1e-10, "L-MMSE MSE two measurements")
    return "scalar and two-measurement values exact"


def check_lmmse_closed_form(ctx: VerifyContext) -> str:
    worst = 0.0
    for i, (m, n) in enumerate(MC_CASES):
        for j, snr in enumerate(MC_SNRS):
            problem = _problem(m, n, snr, 10 * i + j, ctx)
            lin = ctx.linearize(problem)
            closed = lmmse_mse_closed_form(lin)
            mean, stderr = _linear_mc(problem, _lmmse_gain(lin), ctx.trials, ctx.stream(1, i, j))
            _within(mean, closed, stderr, f"M={m} N={n} SNR={snr:g}")
            worst = max(worst, abs(mean - closed) / max(stderr, 1e-300))
    return f"{len(MC_CASES) * len(MC_SNRS)} points, worst {worst:.2f} stderr"


def check_ls_closed_form(ctx: VerifyContext) -> str:
    worst = 0.0
    points = 0
    for i, (m, n) in enumerate(MC_CASES):
        if m < n:
            continue
        for j, snr in enumerate(MC_SNRS):
            problem = _problem(m, n, snr, 10 * i + j, ctx)
            lin = ctx.linearize(problem)
            closed = ls_mse_closed_form(lin)
            if closed < lmmse_mse_closed_form(lin) - 1e-9:
                raise CheckFailed(f"M={m} N={n} SNR={snr:g}: LS closed form below L-MMSE")
            mean, stderr = _linear_mc(problem, _ls_gain(lin), ctx.trials, ctx.stream(2, i, j))
            _within(mean, closed, stderr, f"M={m} N={n} SNR={snr:g}")
            worst = max(worst, abs(mean - closed) / max(stderr, 1e-300))
            points += 1
    return f"{points} points, worst {worst:.2f} stderr"


def check_estimator_path(ctx: VerifyContext) -> str:
    scalar = ProbitProblem.isotropic([[1.0]], 1.0, 1.0)
    lin = ctx.linearize(scalar)
    details = []
    for k, (estimator_id, closed) in enumerate(
        [(EstimatorId.LMMSE, lmmse_mse_closed_form(lin)), (EstimatorId.LS, ls_mse_closed_form(lin))]
    ):
        invoke = estimator_invocation(estimator_id, scalar, ctx.solver, lin)
        mse = empirical_mse(scalar, invoke, ctx.trials, ctx.stream(3, k))
        details.append(_within(mse.mean, closed, mse.stderr, estimator_id.display_name))
    return "; ".join(details)


def check_arcsine_law(ctx: VerifyContext) -> str:
    checked = 0
    for k, smoothing in enumerate([0.0, 0.5]):
        problem = _problem(5, 3, 0.0, 40 + k, ctx, smoothing=smoothing)
        lin = ctx.linearize(problem)
        _, observations = sample_batch(problem, ctx.stream(4, k), ctx.trials)
        products = observations[:, :, None] * observations[:, None, :]
        mean = products.mean(axis=0)
        stderr = products.std(axis=0, ddof=1) / np.sqrt(ctx.trials)
        deviation = np.abs(mean - lin.obs_cov)
        if np.any(deviation > N_STDERR * stderr + 1e-12):
            raise CheckFailed(
                f"smoothing {smoothing}: C_ybar entry off by {np.max(deviation):.3g}"
            )
        checked += mean.size
    return f"{checked} covariance entries within {N_STDERR:g} stderr"


def check_cross_covariance(ctx: VerifyContext) -> str:
    checked = 0
    for k, smoothing in enumerate([0.0, 0.5, 2.0]):
        problem = _problem(6, 3, 0.0, 50 + k, ctx, smoothing=smoothing)
        lin = ctx.linearize(problem)
        signals, observations = sample_batch(problem, ctx.stream(5, k), ctx.trials)
        products = observations[:, :, None] * signals[:, None, :]
        mean = products.mean(axis=0)
        stderr = products.std(axis=0, ddof=1) / np.sqrt(ctx.trials)
        if np.any(np.abs(mean - lin.e_matrix) > N_STDERR * stderr + 1e-12):
            raise CheckFailed(
                f"smoothing {smoothing}: E[y x^T] differs from E by "
                f"{np.max(np.abs(mean - lin.e_matrix)):.3g}"
            )
        checked += mean.size
    return f"{checked} entries of E[y x^T] match E"


def check_orthogonality(ctx: VerifyContext) -> str:
    problem = _problem(8, 3, 5.0, 60, ctx)
    lin = ctx.linearize(problem)
    trials = max(ctx.trials, MIN_ORTHOGONALITY_TRIALS)
    result = residual_correlation(problem, lin, trials, ctx.stream(6, 0))
    if not result.within(N_STDERR):
        raise CheckFailed(f"E[x e^T] not zero: max |entry| {result.max_abs:.3g}")

    # negative control: a wrong gain must be detected
    wrong = Linearization(
        e_matrix=lin.e_matrix,
        obs_cov=lin.obs_cov,
        f_matrix=3.0 * lin.f_matrix,
        z_cov=lin.z_cov,
        prior_cov=lin.prior_cov,
    )
    control = residual_correlation(problem, wrong, NEGATIVE_CONTROL_TRIALS, ctx.stream(6, 1))
    if control.within(N_STDERR):
        raise CheckFailed("negative control with 3F was not detected")
    return f"max |E[x e^T]| {result.max_abs:.3g}; 3F control detected"


def check_gradients(ctx: VerifyContext) -> str:
    problem = _problem(50, 5, 5.0, 70, ctx)
    rng = ctx.stream(7, 0)
    _, values = sample_batch(problem, rng, 1)
    observation = ObservationVector.binary(values[0])
    step = 1e-5
    worst = 0.0
    for loss in LinkLoss:
        objective = BinaryRegressionObjective.for_problem(problem, observation, loss=loss)
        for _ in range(50):
            x = rng.standard_normal(problem.n)
            numeric = np.array(
                [
                    (objective.value(x + step * e) - objective.value(x - step * e)) / (2 * step)
                    for e in np.eye(problem.n)
                ]
            )
            analytic = objective.gradient(x)
            error = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-8)
            worst = max(worst, error)
            if error > 1e-4:
                raise CheckFailed(f"{loss.value} gradient relative error {error:.3g}")
    return f"worst relative error {worst:.2e} over 100 points"


def check_map_oracle(ctx: VerifyContext) -> str:
    scalar = ProbitProblem.isotropic([[1.0]], 1.0, 1.0)
    report = map_probit(scalar, ObservationVector.binary([1.0]), ctx.solver)

    def derivative(x):
        return x - np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi) / special.ndtr(x)

    root = optimize.brentq(derivative, -10.0, 10.0, xtol=1e-14)
    _close(report.estimate[0], root, 1e-8, "scalar MAP")
    return f"MAP {report.estimate[0]:.10f} vs root {root:.10f}"


def check_conjugate_gradients(ctx: VerifyContext) -> str:
    a = np.diag(np.arange(1.0, 11.0))
    b = np.ones(10)
    result = cg_solve(a, b, tol=1e-12, max_iter=100)
    error = float(np.max(np.abs(result.solution - linalg.solve_triangular(a, b))))
    if error > 1e-10:
        raise CheckFailed(f"diagonal system error {error:.3g}")
    m = ctx.stream(8, 0).standard_normal((30, 30))
    spd = m @ m.T + 30.0 * np.eye(30)
    rhs = ctx.stream(8, 1).standard_normal(30)
    result = cg_solve(spd, rhs, tol=1e-12, max_iter=300)
    error = float(np.max(np.abs(result.solution - linalg.solve(spd, rhs, assume_a="pos"))))
    if error > 1e-9:
        raise CheckFailed(f"SPD system error {error:.3g}")
    return f"{result.iterations} iterations on a 30x30 SPD system"


def check_truncated_normal(ctx: VerifyContext) -> str:
    rng = ctx.stream(9, 0)
    details = []
    for mean in (0.0, 3.0, -3.0):
        draws = sample_truncated_normals(np.full(ctx.trials, mean), np.zeros(ctx.trials, bool), rng)
        target = mean + np.exp(-0.5 * mean * mean) / np.sqrt(2 * np.pi) / special.ndtr(mean)
        stderr = draws.std(ddof=1) / np.sqrt(draws.size)
        details.append(_within(float(draws.mean()), float(target), float(stderr), f"mean {mean:g}"))
    far = sample_truncated_normals(np.full(1000, -8.0), np.zeros(1000, bool), rng)
    if not (np.all(far > 0.0) and np.all(np.isfinite(far))):
        raise CheckFailed("tail draws for mean -8 left the positive half-line")
    return "; ".join(details)


def check_mse_ordering(ctx: VerifyContext) -> str:
    for k in range(5):
        problem = _problem(20, 5, 5.0 * k - 10.0, 80 + k, ctx)
        lin = ctx.linearize(problem)
        lmmse = lmmse_mse_closed_form(lin)
        if lmmse > ls_mse_closed_form(lin) + 1e-9:
            raise CheckFailed(f"problem {k}: L-MMSE MSE exceeds LS MSE")
        extended = ProbitProblem(
            design=np.vstack([problem.design, generate_design(1, 5, ctx.stream(10, k))]),
            prior_cov=problem.prior_cov,
            noise_cov=problem.noise_cov[0, 0] * np.eye(21),
        )
        if lmmse_mse_closed_form(ctx.linearize(extended)) > lmmse + 1e-9:
            raise CheckFailed(f"problem {k}: an extra measurement increased the L-MMSE MSE")
    return "L-MMSE <= LS and extra rows never hurt (5 problems)"


SWEEP_TRIALS = 100
AGREEMENT_TOLERANCE = 0.10
OPTIMALITY_CASES = [(10, 5), (50, 5)]


def check_low_snr_agreement(ctx: VerifyContext) -> str:
    base = SyntheticConfig(m=50, n=5, seed=ctx.seed)
    estimators = [EstimatorId.LMMSE, EstimatorId.MAP, EstimatorId.PM]
    results = snr_sweep(base, [-10.0], estimators, SWEEP_TRIALS, cfg=ctx.solver)
    values = {r.estimator_id.value: r.mse_empirical_mean for r in results}
    spread = max(values.values()) / min(values.values()) - 1.0
    summary = ", ".join(f"{k} {v:.4f}" for k, v in values.items())
    if spread > AGREEMENT_TOLERANCE:
        raise CheckFailed(f"MSE spread {spread:.1%} at -10 dB ({summary})")
    return f"spread {spread:.1%} ({summary})"


def check_pm_optimality(ctx: VerifyContext) -> str:
    estimators = [EstimatorId.LMMSE, EstimatorId.LS, EstimatorId.MAP, EstimatorId.PM]
    points = 0
    for m, n in OPTIMALITY_CASES:
        base = SyntheticConfig(m=m, n=n, seed=ctx.seed)
        results = snr_sweep(base, MC_SNRS, estimators, SWEEP_TRIALS, cfg=ctx.solver)
        for snr in MC_SNRS:
            row = {r.estimator_id: r for r in results if r.snr_db == snr and r.available}
            pm = row[EstimatorId.PM]
            for other in row.values():
                if other is pm:
                    continue
                joint = np.hypot(pm.mse_empirical_stderr, other.mse_empirical_stderr)
                if pm.mse_empirical_mean > other.mse_empirical_mean + N_STDERR * joint:
                    raise CheckFailed(
                        f"M={m} N={n} SNR={snr:g}: PM {pm.mse_empirical_mean:.4f} above "
                        f"{other.estimator_id.value} {other.mse_empirical_mean:.4f}"
                    )
            points += 1
    return f"PM lowest within {N_STDERR:g} joint stderr at {points} sweep points"


PROPERTIES: List[Tuple[str, str, Callable[[VerifyContext], str]]] = [
    ("scalar-anchors", "Closed-form values on hand-solvable problems", check_scalar_anchors),
    ("lmmse-mse-vs-mc", "L-MMSE closed-form MSE against Monte-Carlo", check_lmmse_closed_form),
    ("ls-mse-vs-mc", "LS closed-form MSE against Monte-Carlo", check_ls_closed_form),
    ("estimator-path-mse", "Estimator dispatch reproduces the closed forms", check_estimator_path),
    ("arcsine-law", "Observation covariance against Monte-Carlo", check_arcsine_law),
    ("cross-covariance", "E = E[y x^T] for several smoothing levels", check_cross_covariance),
    ("residual-orthogonality", "Linearization residual uncorrelated with x", check_orthogonality),
    ("objective-gradients", "Probit and logistic gradients by finite differences", check_gradients),
    ("map-scalar-oracle", "Scalar MAP against a root-finder", check_map_oracle),
    ("conjugate-gradients", "CG against direct solves", check_conjugate_gradients),
    ("truncated-normal", "Truncated-normal sample means", check_truncated_normal),
    ("mse-ordering", "L-MMSE optimality and monotonicity in M", check_mse_ordering),
    ("low-snr-agreement", "L-MMSE, MAP and PM agree at -10 dB", check_low_snr_agreement),
    ("pm-optimality", "PM attains the lowest empirical MSE", check_pm_optimality),
]


def sabotage_scale(mode: Optional[str]) -> float:
    if mode is None:
        return 1.0
    if mode not in SABOTAGE_MODES:
        raise ConfigurationError(
            f"Unknown sabotage mode: {mode} (expected one of {', '.join(SABOTAGE_MODES)})",
            details={"sabotage": mode},
        )
    return SABOTAGE_MODES[mode]


def run_property(name: str, check: Callable[[VerifyContext], str], ctx: VerifyContext):
    start = time.perf_counter()
    try:
        detail, passed = check(ctx), True
    except CheckFailed as e:
        detail, passed = str(e), False
    except Exception as e:
        detail, passed = f"{type(e).__name__}: {e}", False
        handle_error(e, {"property": name})
    elapsed = time.perf_counter() - start
    logger.info(f"{name}: {'PASS' if passed else 'FAIL'} ({elapsed:.1f}s) {detail}")
    return PropertyOutcome(name=name, passed=passed, detail=detail, elapsed_s=elapsed)


def run_verification(
    ctx: VerifyContext, only: Optional[Sequence[str]] = None
) -> List[PropertyOutcome]:
    """Run every property (or those named in `only`) and return the outcomes."""
    selected = [p for p in PROPERTIES if only is None or p[0] in only]
    if only is not None:
        unknown = sorted(set(only) - {p[0] for p in PROPERTIES})
        if unknown:
            raise ConfigurationError(f"Unknown verification properties: {', '.join(unknown)}")
    return [run_property(name, check, ctx) for name, _, check in selected]


def outcome_table(outcomes: Sequence[PropertyOutcome]) -> ResultTable:
    return ResultTable(
        name="verify",
        columns=["property", "status", "detail"],
        rows=[
            {"property": o.name, "status": "PASS" if o.passed else "FAIL", "detail": o.detail}
            for o in outcomes
        ],
    )


def raise_on_failure(outcomes: Sequence[PropertyOutcome]) -> None:
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        raise VerificationError(
            f"{len(failed)} verification properties failed: {', '.join(failed)}",
            details={"failed": failed},
        )
