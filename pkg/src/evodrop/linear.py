"""Logistic regression trained by single-example SGD under dropout noise.

Each step draws one training example and one fresh mask, updates
``w <- w - eta * l'(w^T (x*eps), y) * (x*eps)`` on the support of ``x*eps``
and keeps the running average of the iterates, which is the reported model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import check_random_state
from .datasets import Dataset, EmptyDatasetError
from .dropout import (
    SamplingDistribution,
    data_dependent_probs,
    resolve_trials,
    sample_counts_on_support,
    sample_multinomial_counts,
    scale_from_counts,
    sample_standard_mask,
)
from .trace import Stopwatch, TraceRow, TrainingTrace

STEP_SIZE_GRID = (0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
DROPOUT_MODES = ("none", "standard", "data-dependent", "uniform")


def logistic_loss(z, y):
    """``log(1 + exp(-y z))`` and its derivative in ``z``, ``-y / (1 + exp(y z))``."""
    yz = np.multiply(y, z)
    loss = np.logaddexp(0.0, -yz)
    deriv = -np.multiply(y, expit(-yz))
    if np.ndim(loss) == 0:
        return float(loss), float(deriv)
    return loss, deriv


class LinearModel:
    """Weight vector plus the running average of the iterates used so far.

    The average covers ``w_1 .. w_t`` (each iterate before its update), and is
    kept lazily: a coordinate's running sum is only brought up to date when
    that coordinate changes, so sparse updates stay O(support).
    """

    def __init__(self, d):
        self.w = np.zeros(d)
        self.steps_taken = 0
        self._sum = np.zeros(d)
        self._last = np.zeros(d, dtype=np.int64)

    @property
    def d(self):
        return self.w.size

    @property
    def w_avg(self):
        t = self.steps_taken
        if t == 0:
            return np.zeros(self.d)
        return (self._sum + self.w * (t - self._last)) / t

    def update(self, idx, delta):
        """Record the current iterate as step t's, then add ``delta`` at ``idx``."""
        t = self.steps_taken + 1
        self._sum[idx] += self.w[idx] * (t - self._last[idx])
        self._last[idx] = t
        self.w[idx] += delta
        self.steps_taken = t


@dataclass(frozen=True)
class StepSizeSchedule:
    """Constant step size, or piecewise constant with multiplicative decays at given steps."""

    base: float
    kind: str = "constant"
    decay_points: tuple = ()
    decay_factors: tuple = ()

    def __post_init__(self):
        if not self.base > 0:
            raise ValueError("step size must be positive")
        if self.kind not in ("constant", "piecewise"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if len(self.decay_points) != len(self.decay_factors):
            raise ValueError("each decay point needs a factor")
        if any(f <= 0 for f in self.decay_factors):
            raise ValueError("decay factors must be positive")

    def __call__(self, t):
        eta = self.base
        if self.kind == "piecewise":
            for point, factor in zip(self.decay_points, self.decay_factors):
                if t >= point:
                    eta *= factor
        return eta


@dataclass(frozen=True)
class DropoutConfig:
    """Which noise the shallow trainer injects.

    ``mode`` is one of ``none``, ``standard`` (Bernoulli with ``delta``),
    ``data-dependent`` (multinomial with p from training second moments) or
    ``uniform`` (multinomial with p = 1/d).  ``k`` is an integer trial count
    or a fraction of d.
    """

    mode: str = "data-dependent"
    delta: float = 0.5
    k: float = 0.5
    smoothing: float = 0.0

    def __post_init__(self):
        if self.mode not in DROPOUT_MODES:
            raise ValueError(f"unknown dropout mode {self.mode!r}; expected one of {DROPOUT_MODES}")

    def distribution(self, dataset):
        d = dataset.d
        k = resolve_trials(self.k, d)
        if self.mode == "data-dependent":
            return SamplingDistribution(data_dependent_probs(dataset.second_moments, self.smoothing), k)
        if self.mode == "uniform":
            return SamplingDistribution.uniform(d, k)
        return None


def sgd_dropout_step(model, x, y, scale, eta):
    """One SGD update on the masked example; returns the indices that were touched.

    ``x`` is a dense vector of length d or a ``(indices, values)`` pair, and
    ``scale`` matches it (length d, or one factor per listed index).
    """
    if isinstance(x, tuple):
        idx, vals = x
        idx = np.asarray(idx, dtype=np.int64)
        scale = np.asarray(scale, dtype=np.float64)
        if scale.shape != np.shape(vals):
            raise ValueError(f"mask has {scale.shape} entries for {np.shape(vals)} support values")
        xh = vals * scale
    else:
        x = np.asarray(x, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if x.shape != (model.d,) or scale.shape != x.shape:
            raise ValueError(f"dimension mismatch: model {model.d}, x {x.shape}, mask {scale.shape}")
        full = x * scale
        idx = np.flatnonzero(full)
        xh = full[idx]
    live = xh != 0
    idx, xh = idx[live], xh[live]
    _, deriv = logistic_loss(float(np.dot(model.w[idx], xh)), y)
    model.update(idx, -eta * deriv * xh)
    return idx


def evaluate(w, dataset):
    """0/1 error (a margin of exactly 0 counts as an error) and mean logistic loss on clean features."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    margins = np.asarray(dataset.X @ w).ravel()
    ym = dataset.y * margins
    err = np.count_nonzero(ym <= 0) / len(dataset)
    loss = math.fsum(np.logaddexp(0.0, -ym)) / len(dataset)
    return err, loss


@dataclass
class ShallowResult:
    model: LinearModel
    trace: TrainingTrace
    distribution: SamplingDistribution | None = None
    config: dict = field(default_factory=dict)


class _MaskStream:
    """Serves (example index, support, scale) triples, sampling dense masks in blocks."""

    def __init__(self, dataset, dropout, dist, rng, block):
        self.X = dataset.X
        self.sparse = dataset.is_sparse
        self.n = len(dataset)
        self.d = dataset.d
        self.dropout = dropout
        self.dist = dist
        self.rng = rng
        self.block = block
        self._buf = iter(())

    def _refill(self):
        rows = self.rng.integers(0, self.n, size=self.block)
        if self.sparse:
            return iter(rows)
        mode = self.dropout.mode
        if mode == "none":
            scales = np.ones((self.block, self.d))
        elif mode == "standard":
            scales = sample_standard_mask(self.dropout.delta, self.d, self.rng, size=self.block)
        else:
            counts = sample_multinomial_counts(self.dist, self.rng, size=self.block)
            scales = scale_from_counts(counts, self.dist)
        return zip(rows, scales)

    def __next__(self):
        try:
            item = next(self._buf)
        except StopIteration:
            self._buf = self._refill()
            item = next(self._buf)
        if not self.sparse:
            i, scale = item
            return i, self.X[i], scale
        i = item
        lo, hi = self.X.indptr[i], self.X.indptr[i + 1]
        idx, vals = self.X.indices[lo:hi], self.X.data[lo:hi]
        mode = self.dropout.mode
        if mode == "none":
            scale = np.ones(idx.size)
        elif mode == "standard":
            scale = sample_standard_mask(self.dropout.delta, idx.size, self.rng)
        else:
            scale = scale_from_counts(sample_counts_on_support(self.dist, idx, self.rng), self.dist, idx)
        return i, (idx, vals), scale


def train_shallow(dataset, dropout, schedule, n_steps, eval_every=0, rng=None, test=None,
                  report="average", timing=False, block=1024):
    """Run ``n_steps`` single-example SGD steps with a fresh example and mask each step.

    Examples are drawn uniformly with replacement.  For data-dependent
    dropout the probabilities are computed once from ``dataset``'s second
    moments.  Trace rows are recorded at step 0, every ``eval_every`` steps
    (0 disables intermediate rows) and at the end, evaluating ``w_avg``
    (``report="average"``) or the last iterate (``report="last"``).
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if report not in ("average", "last"):
        raise ValueError("report must be 'average' or 'last'")
    if not isinstance(schedule, StepSizeSchedule):
        schedule = StepSizeSchedule(float(schedule))
    rng = check_random_state(rng)
    dist = dropout.distribution(dataset)
    model = LinearModel(dataset.d)
    trace = TrainingTrace()
    clock = Stopwatch()
    y = dataset.y

    def record(t):
        w = model.w_avg if report == "average" else model.w
        tr_err, tr_loss = evaluate(w, dataset)
        te_err, te_loss = evaluate(w, test) if test is not None else (None, None)
        trace.append(TraceRow(t, tr_err, tr_loss, te_err, te_loss, clock.elapsed_ms() if timing else None))

    record(0)
    stream = _MaskStream(dataset, dropout, dist, rng, block)
    for t in range(1, n_steps + 1):
        i, x, scale = next(stream)
        sgd_dropout_step(model, x, y[i], scale, schedule(t))
        if (eval_every and t % eval_every == 0) or t == n_steps:
            record(t)
    return ShallowResult(model, trace, dist, {"n_steps": n_steps, "eval_every": eval_every,
                                              "report": report, "dropout": dropout.__dict__,
                                              "eta": schedule.base})


def select_step_size(dataset, dropout, n_steps, grid=STEP_SIZE_GRID, seed=0, eval_every=0):
    """Try every step size in ``grid`` and keep the one with the lowest final training loss.

    Returns ``(best_eta, {eta: ShallowResult})``; every candidate uses the same seed.
    """
    results = {}
    for eta in grid:
        results[eta] = train_shallow(dataset, dropout, StepSizeSchedule(eta), n_steps,
                                     eval_every=eval_every, rng=seed)
    best = min(grid, key=lambda eta: (results[eta].trace.rows[-1].train_loss, -eta))
    return best, results


class DropoutLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary logistic regression fitted by SGD with dropout on the input features.

    Parameters
    ----------
    dropout : {"data-dependent", "uniform", "standard", "none"}
    delta : float
        Drop probability for ``dropout="standard"``.
    k : int or float
        Multinomial trials; a float is a fraction of the number of features.
    eta : float
        Constant step size.
    n_steps : int
        Number of single-example SGD steps.
    average : bool
        Predict with the averaged iterate (default) instead of the last one.
    smoothing : float
        Added under the square root when computing data-dependent probabilities.
    eval_every : int
        Trace cadence in steps (0 records only the first and last step).
    random_state : int, Generator or None
    """

    def __init__(self, dropout="data-dependent", delta=0.5, k=0.5, eta=0.01, n_steps=10000,
                 average=True, smoothing=0.0, eval_every=0, random_state=None):
        self.dropout = dropout
        self.delta = delta
        self.k = k
        self.eta = eta
        self.n_steps = n_steps
        self.average = average
        self.smoothing = smoothing
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, accept_sparse="csr")
        self.classes_ = unique_labels(y)
        if self.classes_.size != 2:
            raise ValueError(f"binary classification only; got {self.classes_.size} classes")
        signed = np.where(y == self.classes_[1], 1, -1)
        data = Dataset(sp.csr_matrix(X) if sp.issparse(X) else X, signed)
        config = DropoutConfig(self.dropout, self.delta, self.k, self.smoothing)
        result = train_shallow(data, config, StepSizeSchedule(self.eta), self.n_steps,
                               eval_every=self.eval_every, rng=self.random_state,
                               report="average" if self.average else "last")
        self.coef_ = result.model.w_avg if self.average else result.model.w.copy()
        self.coef_last_ = result.model.w.copy()
        self.coef_average_ = result.model.w_avg
        self.probabilities_ = None if result.distribution is None else result.distribution.p
        self.trace_ = result.trace
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, accept_sparse="csr")
        return np.asarray(X @ self.coef_).ravel()

    def predict_proba(self, X):
        pos = expit(self.decision_function(X))
        return np.column_stack([1.0 - pos, pos])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
