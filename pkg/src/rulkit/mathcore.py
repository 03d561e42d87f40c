"""Shared numerical primitives.

Covariance kernels, stabilized Cholesky factorization, Gaussian densities and
divergences, Gauss-Hermite quadrature, the normal CDF and a dense
Gaussian-process regressor kept as a reference implementation for tests.
Everything here is plain numpy/scipy; differentiable variants of the few
pieces the training objectives need live in :mod:`rulkit.autodiff`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erf
from scipy.special import logsumexp as _logsumexp

LOG_TWO_PI = math.log(2.0 * math.pi)


class NumericalError(RuntimeError):
    """A numerical routine left its supported regime (indefinite matrix, ...)."""


class DimensionError(ValueError):
    """Shapes passed to a routine are inconsistent."""


# -- kernels ----------------------------------------------------------------


@dataclass
class Kernel:
    """Squared-exponential kernel with per-dimension lengthscales.

    k(x, z) = variance * exp(-1/2 * sum_d ((x_d - z_d) / lengthscale_d)^2)
    """

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if not np.isfinite(self.variance) or self.variance <= 0.0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")
        if self.lengthscales.ndim != 1 or np.any(self.lengthscales <= 0.0):
            raise ValueError("lengthscales must be a vector of positive values")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]


def _check_inputs(kernel: Kernel, X: np.ndarray, name: str) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != kernel.input_dim:
        raise DimensionError(
            f"{name} has {X.shape[1]} columns, kernel expects {kernel.input_dim}"
        )
    return X


def kernel_eval(kernel: Kernel, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Cross-covariance matrix k(X, Z) of shape (n, m)."""
    X = _check_inputs(kernel, X, "X")
    Z = _check_inputs(kernel, Z, "Z")
    xs = X / kernel.lengthscales
    zs = Z / kernel.lengthscales
    d2 = (
        np.sum(xs * xs, axis=1)[:, None]
        + np.sum(zs * zs, axis=1)[None, :]
        - 2.0 * xs @ zs.T
    )
    np.clip(d2, 0.0, None, out=d2)
    return kernel.variance * np.exp(-0.5 * d2)


def kernel_diag(kernel: Kernel, X: np.ndarray) -> np.ndarray:
    """diag k(X, X); constant for a stationary kernel."""
    X = _check_inputs(kernel, X, "X")
    return np.full(X.shape[0], kernel.variance)


# -- stabilized Cholesky ------------------------------------------------------


@dataclass
class CholeskyResult:
    factor: np.ndarray
    jitter: float


def cholesky_jittered(
    A: np.ndarray, base_jitter: float = 1e-6, max_retries: int = 5
) -> CholeskyResult:
    """Lower Cholesky factor of A + jitter*I.

    The first attempt uses no jitter; on failure the jitter starts at
    ``base_jitter`` and is multiplied by 10 for up to ``max_retries`` attempts.
    The jitter actually used is reported in the result.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix contains non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > 1e-10 * scale:
        raise NumericalError("matrix is not symmetric within 1e-10 relative tolerance")
    jitters = [0.0] + [base_jitter * 10.0**k for k in range(max_retries)]
    eye = np.eye(A.shape[0])
    for jitter in jitters:
        try:
            L = np.linalg.cholesky(A if jitter == 0.0 else A + jitter * eye)
            return CholeskyResult(factor=L, jitter=jitter)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"matrix is not positive definite even with jitter {jitters[-1]:.1e}"
    )


# -- Gaussian distributions ---------------------------------------------------


@dataclass
class GaussianDist:
    """Univariate Gaussian, parameterized by mean and variance."""

    mean: float
    variance: float

    def __post_init__(self):
        self.mean = float(self.mean)
        self.variance = float(self.variance)
        if not self.variance > 0.0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass
class MultivariateNormal:
    """Gaussian with covariance given by its lower Cholesky factor."""

    mean: np.ndarray
    covariance_factor: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance_factor = np.asarray(self.covariance_factor, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.covariance_factor.shape != (d, d):
            raise DimensionError("mean and covariance factor dimensions disagree")
        if np.any(np.diag(self.covariance_factor) <= 0.0):
            raise ValueError("covariance factor needs a positive diagonal")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return self.covariance_factor @ self.covariance_factor.T


def mvn_kl(q: MultivariateNormal, p: MultivariateNormal) -> float:
    """KL(q || p) between Gaussians, in closed form via the factors.

    KL = 1/2 (tr(Sp^{-1} Sq) + (mp-mq)^T Sp^{-1} (mp-mq) - d + log|Sp| - log|Sq|)
    """
    if q.dim != p.dim:
        raise DimensionError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    lq, lp = q.covariance_factor, p.covariance_factor
    m = solve_triangular(lp, lq, lower=True, check_finite=False)
    trace = float(np.sum(m * m))
    alpha = solve_triangular(lp, p.mean - q.mean, lower=True, check_finite=False)
    quad = float(alpha @ alpha)
    logdet_p = float(np.sum(np.log(np.diag(lp))))
    logdet_q = float(np.sum(np.log(np.diag(lq))))
    return 0.5 * (trace + quad - q.dim) + logdet_p - logdet_q


def gaussian_logpdf(y, mean, variance):
    """Elementwise log N(y | mean, variance); accepts arrays or scalars."""
    y = np.asarray(y, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(variance <= 0.0):
        raise ValueError("variance must be positive")
    resid = y - mean
    return -0.5 * (LOG_TWO_PI + np.log(variance) + resid * resid / variance)


def gaussian_nll(y: float, dist: GaussianDist) -> float:
    """Negative log density of y under a univariate Gaussian."""
    return float(-gaussian_logpdf(y, dist.mean, dist.variance))


# -- quadrature ---------------------------------------------------------------


@dataclass
class QuadratureRule:
    """Sites and simplex weights approximating E[f(eps)], eps ~ N(0, 1)."""

    sites: np.ndarray
    weights: np.ndarray


def gauss_hermite(s: int) -> QuadratureRule:
    """Gauss-Hermite rule with s sites, normalized for the standard normal.

    Exact for polynomials up to degree 2s - 1. Weights are renormalized by
    their sum so they lie on the simplex to machine precision.
    """
    if not 1 <= int(s) <= 50:
        raise ValueError(f"number of sites must be in [1, 50], got {s}")
    sites, weights = np.polynomial.hermite_e.hermegauss(int(s))
    weights = weights / weights.sum()
    return QuadratureRule(sites=sites, weights=weights)


# -- normal CDF ---------------------------------------------------------------


def gaussian_cdf(x, mean=0.0, std=1.0):
    """F(x; mean, std) = 1/2 (1 + erf((x - mean) / (std sqrt(2))))."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0.0):
        raise ValueError("std must be positive")
    z = (np.asarray(x, dtype=np.float64) - mean) / (std * math.sqrt(2.0))
    return 0.5 * (1.0 + erf(z))


def log_sum_exp(a, axis=None, b=None):
    """Stable log(sum(b * exp(a))); thin wrapper over scipy."""
    return _logsumexp(a, axis=axis, b=b)


# -- dense GP reference -------------------------------------------------------


def exact_gp_predict(kernel: Kernel, noise: float, X: np.ndarray, y: np.ndarray, xstar):
    """Textbook GP posterior predictive for y* at xstar.

    mean = k*^T (K + noise I)^{-1} y
    var  = k(x*, x*) - k*^T (K + noise I)^{-1} k* + noise

    Dense, O(N^3); guarded to N <= 2000 since it exists as a test reference.
    Returns a GaussianDist for a single point, a list for a matrix of points.
    """
    X = _check_inputs(kernel, X, "X")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise DimensionError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if X.shape[0] > 2000:
        raise ValueError("exact_gp_predict is a reference implementation, N <= 2000")
    if noise < 0.0:
        raise ValueError("noise variance must be nonnegative")
    single = np.asarray(xstar).ndim == 1
    Xs = _check_inputs(kernel, xstar, "xstar")
    K = kernel_eval(kernel, X, X) + noise * np.eye(X.shape[0])
    L = cholesky_jittered(K).factor
    alpha = solve_triangular(L, y, lower=True, check_finite=False)
    alpha = solve_triangular(L, alpha, lower=True, trans="T", check_finite=False)
    ks = kernel_eval(kernel, X, Xs)
    v = solve_triangular(L, ks, lower=True, check_finite=False)
    means = ks.T @ alpha
    variances = kernel_diag(kernel, Xs) - np.sum(v * v, axis=0) + noise
    dists = [GaussianDist(m, s2) for m, s2 in zip(means, variances)]
    return dists[0] if single else dists
