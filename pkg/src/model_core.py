"""
Probit Measurement Model

This module defines the generative model behind every estimator in the toolkit:
1. ProbitProblem, the design / prior / noise / smoothing bundle
2. ObservationVector for hard (sign) and smoothed observations
3. SyntheticConfig and the row-normalized synthetic design
4. Instance sampling and the smoothed link f_sigma(z) = 2 Phi(z / sigma) - 1

Random streams follow one splitting rule, see `trial_stream`.
"""

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Tuple

import numpy as np
from scipy import linalg, special

from error_handling import CovarianceError, ValidationError

SYMMETRY_TOL = 1e-10
CONDITION_FLOOR = 1e-12
SQRT2 = np.sqrt(2.0)


def trial_stream(seed: int, *key: int) -> np.random.Generator:
    """
    Return the random stream for `key` under root `seed`.

    Streams are PCG64 generators seeded by SeedSequence(seed, spawn_key=key), so
    the stream of a trial depends only on (seed, key) and never on the order in
    which a worker pool happens to run the trials.
    """
    if seed < 0:
        raise ValidationError("seed must be a nonnegative integer", details={"seed": seed})
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


def hard_sign(z: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(z) >= 0.0, 1.0, -1.0)


def smooth_forward(z: np.ndarray, sigma: float) -> np.ndarray:
    """
    Smoothed probit link 2 Phi(z / sigma) - 1, elementwise.

    Evaluated as erf(z / (sigma sqrt 2)), which is the same function and is odd
    to the last bit.
    """
    if not sigma > 0.0:
        raise ValidationError(
            "smoothing must be positive; use hard_sign for the sign model",
            details={"sigma": sigma},
        )
    return special.erf(np.asarray(z, dtype=float) / (sigma * SQRT2))


def check_covariance(matrix: np.ndarray, name: str) -> np.ndarray:
    """
    Validate a covariance matrix and return a read-only symmetrized copy.

    Raises:
        CovarianceError: not square, not symmetric within 1e-10, or with smallest
            eigenvalue <= 1e-12 times the largest
    """
    a = np.array(matrix, dtype=float, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise CovarianceError(f"{name} must be a square matrix", details={"shape": a.shape})
    if not np.all(np.isfinite(a)):
        raise CovarianceError(f"{name} has non-finite entries")
    asymmetry = float(np.max(np.abs(a - a.T)))
    if asymmetry > SYMMETRY_TOL:
        raise CovarianceError(
            f"{name} is not symmetric (max asymmetry {asymmetry:.3e})",
            details={"asymmetry": asymmetry},
        )
    a = 0.5 * (a + a.T)
    eigenvalues = np.linalg.eigvalsh(a)
    smallest, largest = float(eigenvalues[0]), float(eigenvalues[-1])
    if smallest <= 0.0 or smallest < CONDITION_FLOOR * largest:
        raise CovarianceError(
            f"{name} is not positive definite or is near-singular "
            f"(eigenvalues in [{smallest:.3e}, {largest:.3e}])",
            details={"min_eigenvalue": smallest, "max_eigenvalue": largest},
        )
    a.setflags(write=False)
    return a


def cholesky_factor(matrix: np.ndarray, name: str) -> np.ndarray:
    """Lower Cholesky factor, reporting failure as a non-positive-definite covariance."""
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError as e:
        raise CovarianceError(
            f"Cholesky factorization of {name} failed: matrix is not positive definite",
            details={"error": str(e)},
        )


class ObservationKind(Enum):
    """Observation alphabet."""

    BINARY = "binary"
    SMOOTHED = "smoothed"


@dataclass(frozen=True, eq=False)
class ObservationVector:
    """Observations y in {-1, +1}^M (binary) or y-bar in [-1, 1]^M (smoothed)."""

    values: np.ndarray
    kind: ObservationKind

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size == 0:
            raise ValidationError("observation vector is empty")
        if self.kind == ObservationKind.BINARY:
            if not np.all(np.abs(values) == 1.0):
                raise ValidationError("binary observations must be -1 or +1")
        elif not np.all(np.abs(values) <= 1.0):
            raise ValidationError("smoothed observations must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def binary(cls, values) -> "ObservationVector":
        return cls(np.asarray(values, dtype=float), ObservationKind.BINARY)

    @classmethod
    def smoothed(cls, values) -> "ObservationVector":
        return cls(np.asarray(values, dtype=float), ObservationKind.SMOOTHED)

    @property
    def is_binary(self) -> bool:
        return self.kind == ObservationKind.BINARY

    def __len__(self) -> int:
        return self.values.shape[0]

    def scaled(self, factor: float) -> "ObservationVector":
        """Multiply by a scalar; the result is binary only for factor -1 or +1."""
        values = factor * self.values
        if self.is_binary and abs(factor) == 1.0:
            return ObservationVector.binary(values)
        return ObservationVector.smoothed(values)


@dataclass(frozen=True, eq=False)
class ProbitProblem:
    """
    The generative model y = sign(D x + w) (smoothing 0) or y-bar = f_sigma(D x + w),
    with x ~ N(0, C_x) and w ~ N(0, C_w).
    """

    design: np.ndarray
    prior_cov: np.ndarray
    noise_cov: np.ndarray
    smoothing: float = 0.0

    def __post_init__(self):
        design = np.array(self.design, dtype=float, ndmin=2)
        if design.ndim != 2:
            raise ValidationError("design must be a matrix", details={"shape": design.shape})
        if not np.all(np.isfinite(design)):
            raise ValidationError("design has non-finite entries")
        zero_rows = np.flatnonzero(~np.any(design != 0.0, axis=1))
        if zero_rows.size:
            raise ValidationError(
                f"design has all-zero rows: {zero_rows.tolist()[:10]}",
                details={"rows": zero_rows.tolist()},
            )
        design.setflags(write=False)
        m, n = design.shape

        prior_cov = check_covariance(self.prior_cov, "prior_cov")
        noise_cov = check_covariance(self.noise_cov, "noise_cov")
        if prior_cov.shape != (n, n):
            raise ValidationError(
                f"prior_cov must be {n}x{n}", details={"shape": prior_cov.shape}
            )
        if noise_cov.shape != (m, m):
            raise ValidationError(
                f"noise_cov must be {m}x{m}", details={"shape": noise_cov.shape}
            )
        smoothing = float(self.smoothing)
        if not (smoothing >= 0.0 and np.isfinite(smoothing)):
            raise ValidationError("smoothing must be finite and nonnegative")

        object.__setattr__(self, "design", design)
        object.__setattr__(self, "prior_cov", prior_cov)
        object.__setattr__(self, "noise_cov", noise_cov)
        object.__setattr__(self, "smoothing", smoothing)

    @classmethod
    def isotropic(
        cls,
        design: np.ndarray,
        sigma_x_sq: float,
        sigma_w_sq: float,
        smoothing: float = 0.0,
    ) -> "ProbitProblem":
        """C_x = sigma_x^2 I and C_w = sigma_w^2 I."""
        design = np.array(design, dtype=float, ndmin=2)
        m, n = design.shape
        return cls(design, sigma_x_sq * np.eye(n), sigma_w_sq * np.eye(m), smoothing)

    @property
    def m(self) -> int:
        return self.design.shape[0]

    @property
    def n(self) -> int:
        return self.design.shape[1]

    @property
    def observation_kind(self) -> ObservationKind:
        return ObservationKind.BINARY if self.smoothing == 0.0 else ObservationKind.SMOOTHED

    @cached_property
    def prior_cholesky(self) -> np.ndarray:
        return cholesky_factor(self.prior_cov, "prior_cov")

    @cached_property
    def noise_cholesky(self) -> np.ndarray:
        return cholesky_factor(self.noise_cov, "noise_cov")

    def noise_is_diagonal(self) -> bool:
        off_diagonal = self.noise_cov - np.diag(np.diag(self.noise_cov))
        return not np.any(off_diagonal != 0.0)

    def noise_is_isotropic(self) -> bool:
        diagonal = np.diag(self.noise_cov)
        return self.noise_is_diagonal() and bool(np.all(diagonal == diagonal[0]))

    def observe(self, z: np.ndarray) -> np.ndarray:
        """Apply the measurement nonlinearity to noisy projections z."""
        if self.smoothing == 0.0:
            return hard_sign(z)
        return smooth_forward(z, self.smoothing)


@dataclass(frozen=True)
class SyntheticConfig:
    """
    One synthetic configuration: x ~ N(0, C_x) with C_x = sigma_x^2 Toeplitz(rho^|i-j|)
    and noise variance sigma_w^2 = sigma_x^2 10^(-snr_db / 10).
    """

    m: int
    n: int
    sigma_x_sq: float = 1.0
    snr_db: float = 0.0
    seed: int = 0
    smoothing: float = 0.0
    prior_correlation: float = 0.0

    def __post_init__(self):
        if int(self.m) < 1 or int(self.n) < 1:
            raise ValidationError("m and n must be positive", details={"m": self.m, "n": self.n})
        if not self.sigma_x_sq > 0.0:
            raise ValidationError("sigma_x_sq must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if not -1.0 < self.prior_correlation < 1.0:
            raise ValidationError("prior_correlation must lie in (-1, 1)")
        if self.smoothing < 0.0:
            raise ValidationError("smoothing must be nonnegative")
        noise = self.noise_variance
        if not (noise > 0.0 and np.isfinite(noise)):
            raise ValidationError(
                "derived noise variance must be positive and finite",
                details={"snr_db": self.snr_db, "noise_variance": noise},
            )

    @property
    def noise_variance(self) -> float:
        return float(self.sigma_x_sq * 10.0 ** (-self.snr_db / 10.0))

    def prior_cov(self) -> np.ndarray:
        column = self.prior_correlation ** np.arange(self.n)
        return self.sigma_x_sq * linalg.toeplitz(column)

    def with_snr(self, snr_db: float) -> "SyntheticConfig":
        return SyntheticConfig(
            m=self.m,
            n=self.n,
            sigma_x_sq=self.sigma_x_sq,
            snr_db=snr_db,
            seed=self.seed,
            smoothing=self.smoothing,
            prior_correlation=self.prior_correlation,
        )

    def build_problem(self, design: np.ndarray) -> ProbitProblem:
        return ProbitProblem(
            design=design,
            prior_cov=self.prior_cov(),
            noise_cov=self.noise_variance * np.eye(self.m),
            smoothing=self.smoothing,
        )


def generate_design(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. standard normal M x N matrix with every row scaled to unit l2 norm."""
    if m < 1 or n < 1:
        raise ValidationError("m and n must be positive", details={"m": m, "n": n})
    design = rng.standard_normal((m, n))
    return design / np.linalg.norm(design, axis=1, keepdims=True)


def sample_batch(
    problem: ProbitProblem, rng: np.random.Generator, count: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw `count` independent (signal, observation) pairs.

    Returns:
        signals (count x N) and observation values (count x M)
    """
    signals = rng.standard_normal((count, problem.n)) @ problem.prior_cholesky.T
    noise = rng.standard_normal((count, problem.m)) @ problem.noise_cholesky.T
    return signals, problem.observe(signals @ problem.design.T + noise)


def sample_instance(
    problem: ProbitProblem, rng: np.random.Generator
) -> Tuple[np.ndarray, ObservationVector]:
    """Draw x ~ N(0, C_x), w ~ N(0, C_w) and observe D x + w."""
    signals, values = sample_batch(problem, rng, 1)
    return signals[0], ObservationVector(values[0], problem.observation_kind)

