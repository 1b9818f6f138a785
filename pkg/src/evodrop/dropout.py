"""Dropout noise: Bernoulli masks, multinomial masks and their sampling probabilities.

A multinomial mask draws counts ``m ~ Mult(p_1..p_d; k)`` and rescales each
coordinate by ``m_i / (k p_i)`` so that the masked vector is unbiased.  The
probabilities can be uniform, computed once from the training data's second
moments, or recomputed from every mini-batch of layer outputs.
"""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import (
    DegenerateDistributionError,
    InconsistentDrawError,
    check_random_state,
    check_simplex,
    check_trials,
)

__all__ = [
    "SamplingDistribution",
    "DropoutMask",
    "StandardDropoutSpec",
    "resolve_trials",
    "sample_multinomial_counts",
    "sample_counts_on_support",
    "make_mask",
    "scale_from_counts",
    "sample_multinomial_mask",
    "sample_standard_mask",
    "apply_mask",
    "second_moments",
    "data_dependent_probs",
    "minibatch_probs",
    "StandardDropout",
    "MultinomialDropout",
    "EvolutionalDropout",
]


@dataclass(frozen=True)
class SamplingDistribution:
    """Multinomial dropout law: probabilities ``p`` on the simplex and ``k`` trials."""

    p: np.ndarray
    k: int

    def __post_init__(self):
        object.__setattr__(self, "p", check_simplex(self.p))
        object.__setattr__(self, "k", check_trials(self.k))
        self.p.setflags(write=False)

    @classmethod
    def uniform(cls, d, k):
        return cls(np.full(d, 1.0 / d), k)

    @property
    def d(self):
        return self.p.size


@dataclass(frozen=True)
class DropoutMask:
    counts: np.ndarray
    scale: np.ndarray


@dataclass(frozen=True)
class StandardDropoutSpec:
    """I.i.d. Bernoulli dropout with drop probability ``delta``."""

    delta: float

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {self.delta!r}")

    @property
    def keep_scale(self):
        return 1.0 / (1.0 - self.delta)


def resolve_trials(k, d=None):
    """Turn a dropout level into an integer trial count.

    Integers are returned unchanged.  A float is read as a fraction of ``d``
    (``k=0.5`` means half the features) and ``k*d`` is rounded half up.
    """
    if isinstance(k, numbers.Integral) and not isinstance(k, bool):
        return check_trials(k)
    if isinstance(k, numbers.Real):
        if d is None:
            raise ValueError("a fractional dropout level needs the dimension d")
        if not k > 0:
            raise ValueError(f"dropout level must be positive, got {k!r}")
        return check_trials(max(1, math.floor(k * d + 0.5)))
    raise TypeError(f"cannot interpret {k!r} as a trial count")


def _binomial_chain(k, probs, rest, rng, size):
    """Conditional binomial sampling of the first ``len(probs)`` multinomial cells.

    ``rest`` is the probability of an untracked remainder cell.  Cell ``i`` is
    drawn as ``Binomial(trials left, p_i / mass of cells i.. and remainder)``.
    """
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    counts = np.zeros(shape + (probs.size,), dtype=np.int64)
    tails = np.cumsum(probs[::-1])[::-1] + rest
    remaining = np.full(shape, k, dtype=np.int64)
    for i in np.flatnonzero(probs > 0):
        if not np.any(remaining):
            break
        q = min(1.0, probs[i] / tails[i])
        draw = rng.binomial(remaining, q)
        counts[..., i] = draw
        remaining = remaining - draw
    return counts, remaining


def sample_multinomial_counts(dist, rng=None, size=None):
    """Draw counts ``m ~ Mult(p; k)``; with ``size`` returns one row per draw."""
    rng = check_random_state(rng)
    counts, remaining = _binomial_chain(dist.k, dist.p, 0.0, rng, size)
    # rounding can leave trials unassigned; they belong to the last live cell
    last = np.flatnonzero(dist.p > 0)[-1]
    counts[..., last] += remaining
    return counts


def sample_counts_on_support(dist, support, rng=None):
    """Draw the counts of the coordinates in ``support`` only.

    The marginal law of those counts is exactly that of a full multinomial
    draw; the other coordinates are lumped into one remainder cell, so the
    cost is O(len(support)) instead of O(d).
    """
    rng = check_random_state(rng)
    support = np.asarray(support, dtype=np.int64)
    probs = dist.p[support]
    rest = max(0.0, 1.0 - probs.sum())
    counts, _ = _binomial_chain(dist.k, probs, rest, rng, None)
    return counts


def scale_from_counts(counts, dist, support=None):
    """Scale factors ``m_i / (k p_i)``, set to 0 wherever ``p_i = 0``."""
    p = dist.p if support is None else dist.p[support]
    counts = np.asarray(counts)
    live = p > 0
    if np.any(counts[..., ~live]):
        raise InconsistentDrawError("positive count drawn for a coordinate with p_i = 0")
    denom = np.where(live, dist.k * p, 1.0)
    return np.where(live, counts / denom, 0.0)


def make_mask(counts, dist):
    counts = np.asarray(counts)
    if counts.shape[-1] != dist.d:
        raise ValueError(f"counts have dimension {counts.shape[-1]}, distribution has {dist.d}")
    if np.any(counts < 0) or np.any(counts.sum(axis=-1) != dist.k):
        raise InconsistentDrawError(f"counts must be non-negative and sum to k={dist.k}")
    return DropoutMask(counts=counts, scale=scale_from_counts(counts, dist))


def sample_multinomial_mask(dist, rng=None, size=None):
    """Scale vectors of fresh multinomial masks (one row per draw when ``size`` is set)."""
    return scale_from_counts(sample_multinomial_counts(dist, rng, size), dist)


def sample_standard_mask(spec, d, rng=None, size=None):
    """Bernoulli dropout scales: 0 with probability delta, else ``1/(1-delta)``."""
    if not isinstance(spec, StandardDropoutSpec):
        spec = StandardDropoutSpec(float(spec))
    rng = check_random_state(rng)
    shape = (d,) if size is None else (size, d)
    if spec.delta == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= spec.delta
    return keep * spec.keep_scale


def apply_mask(x, scale):
    """Element-wise product ``x * scale``; sparse inputs stay sparse."""
    scale = np.asarray(scale, dtype=np.float64)
    if sp.issparse(x):
        if x.shape[-1] != scale.shape[-1]:
            raise ValueError(f"dimension mismatch: {x.shape[-1]} != {scale.shape[-1]}")
        return sp.csr_matrix(x.multiply(scale if scale.ndim == 2 else scale[None, :]))
    x = np.asarray(x, dtype=np.float64)
    if x.shape != scale.shape:
        raise ValueError(f"dimension mismatch: {x.shape} != {scale.shape}")
    return x * scale


def second_moments(X):
    """Per-column mean of squares ``E[x_i^2]`` (uncentered)."""
    if sp.issparse(X):
        X = sp.csr_matrix(X)
        if X.shape[0] == 0:
            raise ValueError("cannot compute moments of an empty sample")
        return np.asarray(X.multiply(X).sum(axis=0)).ravel() / X.shape[0]
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("cannot compute moments of an empty sample")
    return np.mean(X * X, axis=0)


def data_dependent_probs(moments, smoothing=0.0):
    """Probabilities proportional to ``sqrt(E[x_i^2] + smoothing)``."""
    s = np.asarray(moments, dtype=np.float64)
    if smoothing < 0:
        raise ValueError("smoothing must be non-negative")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("second moments must be finite and non-negative")
    root = np.sqrt(s + smoothing)
    total = root.sum()
    if not total > 0:
        raise DegenerateDistributionError("all second moments are zero; probabilities undefined")
    return root / total


def minibatch_probs(X):
    """Per-batch probabilities from the empirical second moments of layer outputs ``X`` (m x d)."""
    return data_dependent_probs(second_moments(X))


class StandardDropout(TransformerMixin, BaseEstimator):
    """Bernoulli dropout as a transformer.

    ``transform`` applies a fresh mask to every row, so it is meant for the
    training path (e.g. data augmentation in a pipeline), never for inference.
    """

    def __init__(self, delta=0.5, random_state=None):
        self.delta = delta
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr")
        self.spec_ = StandardDropoutSpec(self.delta)
        self.n_features_in_ = X.shape[1]
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, accept_sparse="csr")
        scale = sample_standard_mask(self.spec_, X.shape[1], self._rng, size=X.shape[0])
        return apply_mask(X, scale)


class MultinomialDropout(TransformerMixin, BaseEstimator):
    """Multinomial dropout with fixed probabilities.

    Parameters
    ----------
    k : int or float
        Trials per mask.  A float is a fraction of the number of features.
    probs : {"data", "uniform"} or array-like
        ``"data"`` sets p from the training second moments (data-dependent
        dropout), ``"uniform"`` uses ``1/d``, an array is taken as given.
    smoothing : float
        Added under the square root when ``probs="data"``.
    random_state : int, Generator or None
    """

    def __init__(self, k=0.5, probs="data", smoothing=0.0, random_state=None):
        self.k = k
        self.probs = probs
        self.smoothing = smoothing
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr")
        d = X.shape[1]
        if isinstance(self.probs, str):
            if self.probs == "data":
                p = data_dependent_probs(second_moments(X), self.smoothing)
            elif self.probs == "uniform":
                p = np.full(d, 1.0 / d)
            else:
                raise ValueError(f"unknown probs mode {self.probs!r}")
        else:
            p = np.asarray(self.probs, dtype=np.float64)
        self.distribution_ = SamplingDistribution(p, resolve_trials(self.k, d))
        self.probabilities_ = self.distribution_.p
        self.n_features_in_ = d
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "distribution_")
        X = check_array(X, accept_sparse="csr")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        scale = sample_multinomial_mask(self.distribution_, self._rng, size=X.shape[0])
        return apply_mask(X, scale)


class EvolutionalDropout(TransformerMixin, BaseEstimator):
    """Multinomial dropout whose probabilities come from the batch being transformed.

    Stateless apart from the random source: every call to ``transform``
    recomputes p from the rows it receives and stores it in ``last_probabilities_``.
    """

    def __init__(self, k=0.5, random_state=None):
        self.k = k
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        if not hasattr(self, "_rng"):
            self.fit()
        X = check_array(X)
        dist = SamplingDistribution(minibatch_probs(X), resolve_trials(self.k, X.shape[1]))
        self.last_probabilities_ = dist.p
        return apply_mask(X, sample_multinomial_mask(dist, self._rng, size=X.shape[0]))
