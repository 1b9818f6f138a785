"""Small input-checking helpers shared across modules."""

import numbers

import numpy as np

SIMPLEX_ATOL = 1e-12


class DegenerateDistributionError(ValueError):
    """Sampling probabilities cannot be formed (all weights are zero)."""


class InconsistentDrawError(ValueError):
    """A count was drawn for a coordinate that has zero probability."""


class InfiniteExpectationError(ValueError):
    """A closed form diverges because some p_i = 0 where the data is non-zero."""


def check_simplex(p, atol=SIMPLEX_ATOL):
    """Return ``p`` as a float64 vector, raising if it is not on the simplex."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"probabilities must be a non-empty 1-d vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite")
    if np.any(p < 0):
        raise ValueError(f"probabilities must be non-negative, min is {p.min()!r}")
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise ValueError(f"probabilities must sum to 1 (|sum - 1| <= {atol}), got {total!r}")
    return p


def check_trials(k):
    """Validate a multinomial trial count; it must be a positive integer."""
    if isinstance(k, bool) or not isinstance(k, numbers.Integral):
        raise TypeError(f"trial count k must be an integer, got {type(k).__name__}")
    if k < 1:
        raise ValueError(f"trial count k must be >= 1, got {k}")
    return int(k)


def check_random_state(rng):
    """Accept a Generator, an int seed, a sequence of int seeds, or None (fresh entropy)."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    if isinstance(rng, (list, tuple)) and rng and all(
            isinstance(v, numbers.Integral) and not isinstance(v, bool) for v in rng):
        return np.random.default_rng([int(v) for v in rng])
    raise TypeError(f"cannot build a numpy Generator from {rng!r}")


def check_same_length(a, b, what="vectors"):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch between {what}: {a.shape[-1]} != {b.shape[-1]}")
