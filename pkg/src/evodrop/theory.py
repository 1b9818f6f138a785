"""Closed-form quantities for multinomial dropout and the oracles that check them.

Every closed form here has an independent route: exhaustive enumeration of
the multinomial outcomes for small ``d`` and ``k``, or a Monte Carlo
estimate reported with its standard error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._validation import InfiniteExpectationError, check_random_state
from .dropout import (
    SamplingDistribution,
    StandardDropoutSpec,
    data_dependent_probs,
    sample_multinomial_mask,
    sample_standard_mask,
)

__all__ = [
    "RegularizerEstimate",
    "RiskBoundFactors",
    "LogisticCurvature",
    "SimplexMinimizationError",
    "enumerate_multinomial",
    "expected_masked_sqnorm_closed",
    "expected_masked_sqnorm_enum",
    "expected_masked_sqnorm_mc",
    "optimal_probs",
    "project_simplex",
    "minimize_sqnorm_over_simplex",
    "mask_covariance_closed",
    "mask_covariance_enum",
    "logistic_curvature",
    "quadratic_regularizer",
    "dropout_regularizer_mc",
    "regularizer_upper_bound",
    "multinomial_second_moment",
    "risk_bound_value",
]


@dataclass(frozen=True)
class RegularizerEstimate:
    value: float
    standard_error: float = 0.0
    method: str = "closed-form"

    def __post_init__(self):
        if self.standard_error < 0:
            raise ValueError("standard error must be non-negative")
        if self.method not in ("monte-carlo", "closed-form", "enumeration"):
            raise ValueError(f"unknown estimation method {self.method!r}")


@dataclass(frozen=True)
class RiskBoundFactors:
    """Factors of the SGD risk bound ``G * B * r / sqrt(n)``."""

    G: float
    B: float
    r: float
    n: int

    def __post_init__(self):
        for name in ("G", "B", "r", "n"):
            if not getattr(self, name) > 0:
                raise ValueError(f"risk bound factor {name} must be positive")

    @property
    def value(self):
        return self.G * self.B * self.r / math.sqrt(self.n)


@dataclass(frozen=True)
class LogisticCurvature:
    q: np.ndarray
    weight: np.ndarray


class SimplexMinimizationError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _moments(moments):
    s = np.asarray(moments, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("second moments must be non-negative")
    return s


def _check_finite_expectation(weights, p):
    bad = (weights != 0) & (p == 0)
    if np.any(bad):
        raise InfiniteExpectationError(
            f"p_i = 0 at non-zero coordinates {np.flatnonzero(bad).tolist()}; expectation is infinite"
        )


def enumerate_multinomial(p, k):
    """Yield ``(counts, probability)`` for every outcome of ``Mult(p; k)``."""
    p = np.asarray(p, dtype=np.float64)
    d = p.size
    log_k = math.lgamma(k + 1)
    # stars and bars: choose d-1 bar positions among k + d - 1 slots
    for bars in itertools.combinations(range(k + d - 1), d - 1):
        edges = (-1,) + bars + (k + d - 1,)
        counts = np.array([edges[i + 1] - edges[i] - 1 for i in range(d)], dtype=np.int64)
        if np.any((counts > 0) & (p == 0)):
            continue
        live = counts > 0
        logpmf = log_k - sum(math.lgamma(c + 1) for c in counts)
        logpmf += float(np.sum(counts[live] * np.log(p[live])))
        yield counts, math.exp(logpmf)


def expected_masked_sqnorm_closed(moments, dist):
    """``E||x * eps||^2 = (1/k) sum s_i/p_i + ((k-1)/k) sum s_i``."""
    s = _moments(moments)
    p = dist.p
    _check_finite_expectation(s, p)
    live = s > 0
    k = dist.k
    return float(np.sum(s[live] / p[live]) / k + (k - 1) / k * np.sum(s))


def expected_masked_sqnorm_enum(X, dist):
    """Exact ``E||x * eps||^2`` over an empirical sample by enumerating every mask."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s = np.mean(X * X, axis=0)
    _check_finite_expectation(s, dist.p)
    live = dist.p > 0
    total = 0.0
    for counts, prob in enumerate_multinomial(dist.p, dist.k):
        eps = np.zeros(dist.d)
        eps[live] = counts[live] / (dist.k * dist.p[live])
        total += prob * float(np.sum(s * eps * eps))
    return total


def expected_masked_sqnorm_mc(X, dist, trials, rng=None, chunk=65536):
    """Monte Carlo estimate of ``E||x * eps||^2`` with ``x`` drawn uniformly from ``X``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = check_random_state(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        rows = X[rng.integers(0, X.shape[0], size=m)]
        eps = sample_multinomial_mask(dist, rng, size=m)
        vals = np.sum((rows * eps) ** 2, axis=1)
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += m
    return _mc_estimate(total, total_sq, trials)


def _mc_estimate(total, total_sq, n):
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return RegularizerEstimate(float(mean), math.sqrt(var / n), "monte-carlo")


def optimal_probs(moments):
    """Minimizer of the expected masked squared norm: ``p_i ∝ sqrt(E[x_i^2])``."""
    return data_dependent_probs(_moments(moments), 0.0)


def project_simplex(v):
    """Euclidean projection of ``v`` onto ``{p >= 0, sum p = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def _sqnorm_objective(s, k, p):
    live = s > 0
    if np.any(p[live] <= 0):
        return np.inf
    return float(np.sum(s[live] / p[live]) / k + (k - 1) / k * np.sum(s))


def _grid_minimize(s, k, step):
    d = s.size
    n = int(round(1.0 / step))
    ticks = np.arange(n + 1) / n
    if d == 2:
        P = np.column_stack([ticks, 1.0 - ticks])
    elif d == 3:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        keep = a + b <= 1.0 + 1e-12
        P = np.column_stack([a[keep], b[keep], np.clip(1.0 - a[keep] - b[keep], 0.0, None)])
    else:
        raise ValueError("grid search is only available for d <= 3")
    live = s > 0
    with np.errstate(divide="ignore"):
        vals = np.where(np.all(P[:, live] > 0, axis=1),
                        np.sum(s[live] / np.where(P[:, live] > 0, P[:, live], 1.0), axis=1), np.inf)
    return P[int(np.argmin(vals))]


def minimize_sqnorm_over_simplex(moments, k=1, tolerance=1e-10, method="pgd",
                                 grid_step=1e-3, max_iter=200000):
    """Numerically minimize the expected masked squared norm over the simplex.

    ``method="pgd"`` runs projected gradient descent with backtracking and
    stops once the projected-gradient fixed-point residual drops below
    ``tolerance`` or an accepted step no longer lowers the objective in
    floating point; ``method="grid"`` scans a grid of spacing ``grid_step``
    (``d <= 3`` only).  Raises :class:`SimplexMinimizationError` when the
    iteration cap is hit.
    """
    s = _moments(moments)
    if not np.any(s > 0):
        raise ValueError("at least one second moment must be positive")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if method == "grid":
        return _grid_minimize(s, k, grid_step)
    if method != "pgd":
        raise ValueError(f"unknown method {method!r}")

    live = s > 0
    p = np.where(live, 1.0, 0.0)
    p /= p.sum()
    f = _sqnorm_objective(s, k, p)
    step = 1.0
    residual = np.inf
    for _ in range(max_iter):
        grad = np.zeros_like(p)
        grad[live] = -s[live] / (k * p[live] ** 2)
        step *= 2.0
        while True:
            cand = project_simplex(p - step * grad)
            f_cand = _sqnorm_objective(s, k, cand)
            diff = cand - p
            # Armijo condition for projected steps
            if f_cand <= f + grad @ diff + diff @ diff / (2.0 * step):
                break
            step *= 0.5
            if step < 1e-300:
                raise SimplexMinimizationError("line search collapsed", residual)
        residual = float(np.max(np.abs(diff)))
        if f_cand >= f and residual > 0:
            # no representable decrease left: p is optimal to working precision
            return p
        p, f = cand, f_cand
        if residual <= tolerance:
            return p
    raise SimplexMinimizationError(f"no convergence after {max_iter} iterations", residual)


def mask_covariance_closed(x, dist):
    """Covariance of ``x * eps`` over the mask law: ``(diag(x_i^2/p_i) - x x^T) / k``."""
    x = np.asarray(x, dtype=np.float64)
    p = dist.p
    _check_finite_expectation(x, p)
    live = x != 0
    diag = np.zeros_like(x)
    diag[live] = x[live] ** 2 / p[live]
    return (np.diag(diag) - np.outer(x, x)) / dist.k


def mask_covariance_enum(x, dist):
    """Exact covariance of ``x * eps`` by enumerating all multinomial outcomes."""
    x = np.asarray(x, dtype=np.float64)
    live = dist.p > 0
    second = np.zeros((x.size, x.size))
    mean = np.zeros(x.size)
    for counts, prob in enumerate_multinomial(dist.p, dist.k):
        eps = np.zeros(x.size)
        eps[live] = counts[live] / (dist.k * dist.p[live])
        v = x * eps
        mean += prob * v
        second += prob * np.outer(v, v)
    return second - np.outer(mean, mean)


def logistic_curvature(z):
    """``q(z) = 1/(1+exp(-z/2))`` and its curvature weight ``q(1-q)``."""
    z = np.asarray(z, dtype=np.float64)
    q = 0.5 * (1.0 + np.tanh(z / 4.0))
    return LogisticCurvature(q=q, weight=q * (1.0 - q))


def quadratic_regularizer(w, X, dist):
    """Second-order approximation of the dropout regularizer over the sample ``X``."""
    w = np.asarray(w, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    p = dist.p
    bad = np.any(X[:, p == 0] != 0)
    if bad:
        raise InfiniteExpectationError("p_i = 0 on a coordinate where the sample is non-zero")
    live = p > 0
    margins = X @ w
    # w^T C w = (sum_i w_i^2 x_i^2 / p_i - (w^T x)^2) / k
    quad = (np.sum((w[live] ** 2 / p[live]) * X[:, live] ** 2, axis=1) - margins ** 2) / dist.k
    weight = logistic_curvature(margins).weight
    return RegularizerEstimate(float(np.mean(weight * quad) / 2.0), 0.0, "closed-form")


def _log_partition(z):
    # log(exp(z/2) + exp(-z/2)), overflow-safe
    return np.logaddexp(z / 2.0, -z / 2.0)


def dropout_regularizer_mc(w, X, noise, trials, rng=None, chunk=65536):
    """Monte Carlo estimate of the exact logistic dropout regularizer.

    ``noise`` is a :class:`SamplingDistribution` (multinomial) or a
    :class:`StandardDropoutSpec` / float drop rate (Bernoulli).  Rows of ``X``
    are visited cyclically, so with ``trials`` a multiple of ``len(X)`` each
    row gets the same number of mask draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = check_random_state(rng)
    w = np.asarray(w, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    base = _log_partition(X @ w)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        idx = (done + np.arange(m)) % n
        if isinstance(noise, SamplingDistribution):
            eps = sample_multinomial_mask(noise, rng, size=m)
        else:
            eps = sample_standard_mask(noise if isinstance(noise, StandardDropoutSpec)
                                       else StandardDropoutSpec(float(noise)), d, rng, size=m)
        vals = _log_partition(np.sum(X[idx] * eps * w, axis=1)) - base[idx]
        total += vals.sum()
        total_sq += np.dot(vals, vals)
        done += m
    return _mc_estimate(total, total_sq, trials)


def regularizer_upper_bound(w, moments, dist):
    """``||w||^2 (sum s_i/p_i - sum s_i) / (8k)``, an upper bound on the quadratic regularizer."""
    s = _moments(moments)
    w = np.asarray(w, dtype=np.float64)
    _check_finite_expectation(s, dist.p)
    live = s > 0
    return float(np.dot(w, w) * (np.sum(s[live] / dist.p[live]) - np.sum(s)) / (8.0 * dist.k))


def multinomial_second_moment(dist):
    """``E[m_i^2] = k p_i (1 - p_i) + k^2 p_i^2``."""
    p, k = dist.p, dist.k
    return k * p * (1.0 - p) + k * k * p * p


def risk_bound_value(factors):
    return factors.value
