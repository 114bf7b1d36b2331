"""
Numerical Solvers

Building blocks shared by the estimators:
1. Conjugate gradients for symmetric positive-definite systems
2. Accelerated gradient descent with backtracking and function-value restart
3. Numerically stable log Phi and inverse Mills ratio
4. Truncated standard-normal sampling on a half-line
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import special

from error_handling import NumericalError, ValidationError

logger = logging.getLogger("linprobit.solvers")

LinearOperator = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]

SQRT2 = np.sqrt(2.0)
SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
LOG_CDF_TAIL = -6.0
TAIL_SWITCH = 5.0


@dataclass(frozen=True, eq=False)
class CgResult:
    """Solution of A x = b with convergence information."""

    solution: np.ndarray
    iterations: int
    residual: float
    converged: bool


def cg_solve(
    a_apply: LinearOperator,
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 1000,
    x0: Optional[np.ndarray] = None,
) -> CgResult:
    """
    Conjugate gradients for a symmetric positive-definite operator.

    Stops when the relative residual ||A x - b|| / ||b|| is at most `tol`. The
    recursive residual is confirmed against the true residual before stopping;
    on disagreement the recursion restarts from the true residual.

    Args:
        a_apply: Matrix or callable computing A @ v
        b: Right-hand side
        tol: Relative residual threshold
        max_iter: Iteration cap; reaching it returns with converged=False
        x0: Starting point (zeros by default)

    Raises:
        NumericalError: negative or zero curvature p^T A p <= 0
    """
    if not tol > 0.0:
        raise ValidationError("tol must be positive", details={"tol": tol})
    if max_iter < 1:
        raise ValidationError("max_iter must be at least 1", details={"max_iter": max_iter})
    apply = (lambda v: a_apply @ v) if isinstance(a_apply, np.ndarray) else a_apply

    b = np.asarray(b, dtype=float)
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if b_norm == 0.0:
        b_norm = 1.0
    r = b - apply(x)
    p = r.copy()
    rr = float(r @ r)

    # counts update steps; a starting point that already solves the system takes 0
    iterations = 0
    while iterations < max_iter:
        if np.sqrt(rr) <= tol * b_norm:
            true_r = b - apply(x)
            true_rr = float(true_r @ true_r)
            if np.sqrt(true_rr) <= tol * b_norm:
                rr = true_rr
                break
            r, rr = true_r, true_rr
            p = r.copy()
        iterations += 1
        ap = apply(p)
        curvature = float(p @ ap)
        if curvature <= 0.0:
            raise NumericalError(
                f"operator is not symmetric positive definite: p^T A p = {curvature:.3e} "
                f"at iteration {iterations}",
                details={"curvature": curvature, "iteration": iterations},
            )
        alpha = rr / curvature
        x = x + alpha * p
        r = r - alpha * ap
        rr_next = float(r @ r)
        p = r + (rr_next / rr) * p
        rr = rr_next
    else:
        true_r = b - apply(x)
        rr = float(true_r @ true_r)

    residual = float(np.sqrt(rr)) / b_norm
    converged = residual <= tol
    if not converged:
        logger.warning(
            f"CG did not converge in {max_iter} iterations (relative residual {residual:.3e})"
        )
    return CgResult(solution=x, iterations=iterations, residual=residual, converged=converged)


@dataclass(frozen=True, eq=False)
class GradientDescentResult:
    """Minimizer found by accelerated gradient descent."""

    solution: np.ndarray
    objective: float
    gradient_norm: float
    iterations: int
    restarts: int
    converged: bool
    diverged: bool


def minimize_accelerated(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 20000,
    step: float = 1.0,
    backtrack: float = 0.5,
    expand: float = 1.25,
    max_step: Optional[float] = None,
    divergence_bound: Optional[float] = None,
) -> GradientDescentResult:
    """
    Minimize a smooth convex function with Nesterov acceleration.

    Each iteration takes a gradient step from the extrapolated point, shrinking
    the step until the quadratic upper bound holds, then lets it grow again by
    `expand`, never beyond `max_step` (the initial step when not given). When
    the objective would increase the momentum is reset and a plain gradient
    step from the current iterate is taken instead, so accepted objective
    values never increase beyond roundoff.

    Stops when ||grad f(x)|| <= tol * max(1, ||x||), after `max_iter`
    iterations, or when ||x|| exceeds `divergence_bound`.
    """
    x = np.array(x0, dtype=float)
    x_prev = x.copy()
    f_x = float(objective(x))
    if not np.isfinite(f_x):
        raise NumericalError("objective is not finite at the starting point")
    t = 1.0
    restarts = 0
    max_step = step if max_step is None else max_step
    converged = diverged = False
    grad_norm = np.inf
    slack = 64.0 * np.finfo(float).eps

    iterations = 0
    for iterations in range(1, max_iter + 1):
        g_x = gradient(x)
        grad_norm = float(np.linalg.norm(g_x))
        if grad_norm <= tol * max(1.0, float(np.linalg.norm(x))):
            converged = True
            break

        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x + ((t - 1.0) / t_next) * (x - x_prev)
        f_y = float(objective(y))
        g_y = gradient(y)

        x_new, f_new, step = _backtracking_step(objective, y, f_y, g_y, step, backtrack, slack)
        if f_new > f_x + slack * max(1.0, abs(f_x)):
            # function-value restart
            restarts += 1
            t_next = 1.0
            x_new, f_new, step = _backtracking_step(
                objective, x, f_x, g_x, step, backtrack, slack
            )

        x_prev, x, f_x, t = x, x_new, f_new, t_next
        step = min(step * expand, max_step)

        if divergence_bound is not None and float(np.linalg.norm(x)) > divergence_bound:
            diverged = True
            break
    else:
        grad_norm = float(np.linalg.norm(gradient(x)))
        converged = grad_norm <= tol * max(1.0, float(np.linalg.norm(x)))

    return GradientDescentResult(
        solution=x,
        objective=f_x,
        gradient_norm=grad_norm,
        iterations=iterations,
        restarts=restarts,
        converged=converged,
        diverged=diverged,
    )


def _backtracking_step(objective, y, f_y, g_y, step, backtrack, slack):
    g_sq = float(g_y @ g_y)
    while True:
        candidate = y - step * g_y
        f_candidate = float(objective(candidate))
        bound = f_y - 0.5 * step * g_sq + slack * max(1.0, abs(f_y))
        if np.isfinite(f_candidate) and f_candidate <= bound:
            return candidate, f_candidate, step
        step *= backtrack
        if step < 1e-300:
            raise NumericalError("backtracking line search failed to find a descent step")


def log_normal_cdf(t: np.ndarray) -> np.ndarray:
    """
    log Phi(t) without cancellation in either tail.

    Below -6 uses Phi(t) = erfcx(-t / sqrt 2) exp(-t^2 / 2) / 2; above 0 uses
    log1p(-Phi(-t)).
    """
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    lower = t < LOG_CDF_TAIL
    upper = t > 0.0
    middle = ~(lower | upper)
    u = -t[lower] / SQRT2
    out[lower] = np.log(0.5 * special.erfcx(u)) - u * u
    out[middle] = np.log(special.ndtr(t[middle]))
    out[upper] = np.log1p(-special.ndtr(-t[upper]))
    return out


def inverse_mills_ratio(t: np.ndarray) -> np.ndarray:
    """phi(t) / Phi(t), the derivative of log Phi, stable for all t."""
    return SQRT_2_OVER_PI / special.erfcx(-np.asarray(t, dtype=float) / SQRT2)


def _lower_truncated_standard(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw t ~ N(0, 1) conditioned on t > a, elementwise."""
    out = np.empty_like(a)
    far = a > TAIL_SWITCH
    below = a < -TAIL_SWITCH
    middle = ~(far | below)

    if middle.any():
        u = 1.0 - rng.random(int(middle.sum()))
        out[middle] = -special.ndtri(u * special.ndtr(-a[middle]))

    # mass above a is at least 1 - 3e-7: plain rejection
    pending = np.flatnonzero(below)
    while pending.size:
        draws = rng.standard_normal(pending.size)
        accepted = draws > a[pending]
        out[pending[accepted]] = draws[accepted]
        pending = pending[~accepted]

    # deep tail: exponential proposal with the optimal rate
    pending = np.flatnonzero(far)
    while pending.size:
        a_p = a[pending]
        rate = 0.5 * (a_p + np.sqrt(a_p * a_p + 4.0))
        proposal = a_p + rng.exponential(1.0, pending.size) / rate
        accepted = rng.random(pending.size) <= np.exp(-0.5 * (proposal - rate) ** 2)
        out[pending[accepted]] = proposal[accepted]
        pending = pending[~accepted]

    return out


def sample_truncated_normals(
    means: np.ndarray, lower_tail: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """
    Draw z_i ~ N(mean_i, 1) conditioned on z_i < 0 where lower_tail_i, else z_i > 0.

    Moderate truncation points use the inverse CDF; truncation points more than
    5 standard deviations from the mean use rejection sampling.
    """
    means = np.asarray(means, dtype=float)
    orientation = np.where(np.asarray(lower_tail, dtype=bool), -1.0, 1.0)
    oriented = orientation * means
    return orientation * (oriented + _lower_truncated_standard(-oriented, rng))


def sample_truncated_normal(mean: float, lower_tail: bool, rng: np.random.Generator) -> float:
    """Scalar form of `sample_truncated_normals`."""
    return float(sample_truncated_normals(np.array([mean]), np.array([lower_tail]), rng)[0])
