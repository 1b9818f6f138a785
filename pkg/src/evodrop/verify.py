"""Fixed registry of closed-form-versus-oracle checks and the report they produce."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .dropout import SamplingDistribution, sample_multinomial_counts, scale_from_counts
from .theory import (
    dropout_regularizer_mc,
    enumerate_multinomial,
    expected_masked_sqnorm_closed,
    expected_masked_sqnorm_enum,
    expected_masked_sqnorm_mc,
    mask_covariance_closed,
    mask_covariance_enum,
    minimize_sqnorm_over_simplex,
    multinomial_second_moment,
    optimal_probs,
    quadratic_regularizer,
    regularizer_upper_bound,
)

SIGMA_BAND = 4.0
EXACT_TOL = 1e-12
FAULTS = ("sqnorm-sign",)


@dataclass(frozen=True)
class CheckResult:
    """One verification record.

    ``closed_form`` and ``oracle`` are the two compared quantities (for
    vector checks, the entry with the largest discrepancy); ``band`` is the
    allowed absolute gap.
    """

    name: str
    closed_form: float
    oracle: float
    band: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: closed_form={self.closed_form:.12g} oracle={self.oracle:.12g} "
                f"band={self.band:.3g}{'  ' + self.detail if self.detail else ''}")


def _random_simplex(rng, d, floor=0.0):
    p = rng.dirichlet(np.ones(d)) + floor
    return p / p.sum()


def _worst(closed, oracle, band, name, detail=""):
    closed, oracle, band = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (closed, oracle, band))
    band = np.broadcast_to(band, closed.shape)
    ratio = np.abs(closed - oracle) / np.where(band > 0, band, np.inf)
    j = int(np.argmax(ratio))
    ok = bool(np.all(np.abs(closed - oracle) <= band))
    return CheckResult(name, float(closed[j]), float(oracle[j]), float(band[j]), ok, detail)


class Verifier:
    def __init__(self, seed=0, trials=200_000, fault=None):
        if fault is not None and fault not in FAULTS:
            raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
        self.seed = seed
        self.trials = trials
        self.fault = fault

    def rng(self, name):
        # independent stream per check, so checks do not shift each other's draws
        tag = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
        return np.random.default_rng([self.seed, tag, len(name)])

    def _sqnorm_closed(self, s, dist):
        value = expected_masked_sqnorm_closed(s, dist)
        return -value if self.fault == "sqnorm-sign" else value

    # -- the registry ---------------------------------------------------------

    def check_count_sum(self):
        rng = self.rng("count-sum")
        dist = SamplingDistribution(_random_simplex(rng, 5), 3)
        counts = sample_multinomial_counts(dist, rng, size=self.trials)
        sums = counts.sum(axis=1)
        bad = int(np.count_nonzero(sums != dist.k))
        return CheckResult("multinomial-count-sum", float(dist.k), float(sums[np.argmax(sums != dist.k)]),
                           0.0, bad == 0, f"{bad} of {self.trials} draws off")

    def check_unbiased_scale(self):
        rng = self.rng("unbiased-scale")
        dist = SamplingDistribution(_random_simplex(rng, 5, floor=0.02), 3)
        eps = scale_from_counts(sample_multinomial_counts(dist, rng, size=self.trials), dist)
        se = eps.std(axis=0, ddof=1) / math.sqrt(self.trials)
        return _worst(np.ones(dist.d), eps.mean(axis=0), SIGMA_BAND * se, "multinomial-unbiased-scale")

    def check_second_moment_mc(self):
        rng = self.rng("second-moment-mc")
        dist = SamplingDistribution(_random_simplex(rng, 5), 3)
        counts = sample_multinomial_counts(dist, rng, size=self.trials).astype(np.float64)
        sq = counts * counts
        se = sq.std(axis=0, ddof=1) / math.sqrt(self.trials)
        return _worst(multinomial_second_moment(dist), sq.mean(axis=0), SIGMA_BAND * se,
                      "multinomial-second-moment-mc")

    def check_second_moment_enum(self):
        rng = self.rng("second-moment-enum")
        dist = SamplingDistribution(_random_simplex(rng, 3), 4)
        exact = np.zeros(3)
        for counts, prob in enumerate_multinomial(dist.p, dist.k):
            exact += prob * counts.astype(np.float64) ** 2
        return _worst(multinomial_second_moment(dist), exact, EXACT_TOL * np.maximum(1.0, exact),
                      "multinomial-second-moment-enumeration")

    def check_chain_law(self):
        rng = self.rng("chain-law")
        dist = SamplingDistribution(_random_simplex(rng, 3), 3)
        counts = sample_multinomial_counts(dist, rng, size=self.trials)
        outcomes = list(enumerate_multinomial(dist.p, dist.k))
        keys = counts @ np.array([16, 4, 1])
        freq = np.array([np.mean(keys == c @ np.array([16, 4, 1])) for c, _ in outcomes])
        pmf = np.array([q for _, q in outcomes])
        band = SIGMA_BAND * np.sqrt(pmf * (1 - pmf) / self.trials)
        return _worst(pmf, freq, band, "binomial-chain-vs-enumeration", f"{len(outcomes)} outcomes")

    def check_sqnorm_enum(self):
        rng = self.rng("sqnorm-enum")
        results = []
        for d in (1, 2, 3):
            for k in (1, 2, 3):
                X = rng.standard_normal((4, d))
                dist = SamplingDistribution(_random_simplex(rng, d, floor=0.01), k)
                s = np.mean(X * X, axis=0)
                exact = expected_masked_sqnorm_enum(X, dist)
                results.append(_worst(self._sqnorm_closed(s, dist), exact, EXACT_TOL * max(1.0, abs(exact)),
                                      "sqnorm-closed-vs-enumeration", f"worst at d={d} k={k}"))
        return max(results, key=lambda r: (not r.passed, abs(r.closed_form - r.oracle) / r.band))

    def check_sqnorm_mc(self):
        rng = self.rng("sqnorm-mc")
        d = 10
        X = rng.standard_normal((50, d)) * np.exp(rng.uniform(-1, 1, size=d))
        dist = SamplingDistribution(_random_simplex(rng, d, floor=0.02), 4)
        s = np.mean(X * X, axis=0)
        est = expected_masked_sqnorm_mc(X, dist, self.trials, rng)
        return _worst(self._sqnorm_closed(s, dist), est.value, SIGMA_BAND * est.standard_error,
                      "sqnorm-closed-vs-monte-carlo")

    def check_optimal_probs(self):
        rng = self.rng("optimal-probs")
        worst_gap = 0.0
        worst_obj = -np.inf
        for d in (2, 3, 5, 10):
            for _ in range(5):
                s = np.exp(rng.uniform(-2, 2, size=d))
                k = int(rng.integers(1, 2 * d))
                dist = SamplingDistribution(optimal_probs(s), k)
                numeric = minimize_sqnorm_over_simplex(s, k, tolerance=1e-12)
                worst_gap = max(worst_gap, float(np.max(np.abs(numeric - dist.p))))
                obj_star = self._sqnorm_closed(s, dist)
                obj_num = expected_masked_sqnorm_closed(s, SamplingDistribution(numeric / numeric.sum(), k))
                worst_obj = max(worst_obj, obj_star - obj_num)
        ok = worst_gap <= 2e-3 and worst_obj <= 1e-9
        return CheckResult("optimal-probs-vs-numeric-minimizer", 0.0, worst_gap, 2e-3, ok,
                           f"max objective advantage of numeric candidate {worst_obj:.3g} (limit 1e-9)")

    def check_optimal_probs_grid(self):
        s = np.array([9.0, 4.0, 1.0])
        grid = minimize_sqnorm_over_simplex(s, 1, method="grid", grid_step=1e-3)
        return _worst(optimal_probs(s), grid, 2e-3, "optimal-probs-vs-grid")

    def check_covariance_enum(self):
        x = np.array([1.0, 1.0])
        dist = SamplingDistribution(np.array([0.5, 0.5]), 1)
        return _worst(mask_covariance_closed(x, dist).ravel(), mask_covariance_enum(x, dist).ravel(),
                      EXACT_TOL, "mask-covariance-vs-enumeration")

    def check_covariance_mc(self):
        rng = self.rng("covariance-mc")
        x = rng.standard_normal(4)
        dist = SamplingDistribution(_random_simplex(rng, 4, floor=0.05), 3)
        eps = scale_from_counts(sample_multinomial_counts(dist, rng, size=self.trials), dist)
        v = x * eps
        centered = v - x
        prods = centered[:, :, None] * centered[:, None, :]
        emp = prods.mean(axis=0)
        se = prods.std(axis=0, ddof=1) / math.sqrt(self.trials)
        return _worst(mask_covariance_closed(x, dist).ravel(), emp.ravel(), SIGMA_BAND * se.ravel(),
                      "mask-covariance-vs-monte-carlo")

    def _regularizer_instance(self, rng, w_norm):
        d = 5
        X = rng.standard_normal((20, d))
        dist = SamplingDistribution(_random_simplex(rng, d, floor=0.05), 4)
        w = rng.standard_normal(d)
        return X, dist, w * (w_norm / np.linalg.norm(w))

    def check_jensen(self):
        rng = self.rng("jensen")
        X, dist, w = self._regularizer_instance(rng, 2.0)
        est = dropout_regularizer_mc(w, X, dist, self.trials, rng)
        return CheckResult("regularizer-nonnegative", 0.0, est.value, SIGMA_BAND * est.standard_error,
                           est.value >= -SIGMA_BAND * est.standard_error)

    def check_taylor(self):
        rng = self.rng("taylor")
        X, dist, w = self._regularizer_instance(rng, 0.05)
        est = dropout_regularizer_mc(w, X, dist, self.trials, rng)
        quad = quadratic_regularizer(w, X, dist).value
        return _worst(quad, est.value, SIGMA_BAND * est.standard_error, "regularizer-quadratic-vs-monte-carlo")

    def check_upper_bound(self):
        rng = self.rng("upper-bound")
        margin = np.inf
        for _ in range(20):
            X, dist, w = self._regularizer_instance(rng, rng.uniform(0.1, 3.0))
            s = np.mean(X * X, axis=0)
            margin = min(margin, regularizer_upper_bound(w, s, dist) - quadratic_regularizer(w, X, dist).value)
        return CheckResult("regularizer-upper-bound", 0.0, margin, 0.0, margin >= 0.0,
                           "smallest (bound - quadratic) over 20 instances")

    def check_risk_factor(self):
        rng = self.rng("risk-factor")
        s = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), size=20))
        k = 10
        b_opt = math.sqrt(abs(self._sqnorm_closed(s, SamplingDistribution(optimal_probs(s), k))))
        b_uni = math.sqrt(expected_masked_sqnorm_closed(s, SamplingDistribution.uniform(20, k)))
        return CheckResult("risk-factor-optimal-vs-uniform", b_opt, b_uni, 0.0, b_opt <= b_uni,
                           "B at optimal p must not exceed B at uniform p")

    CHECKS = (
        "check_count_sum", "check_unbiased_scale", "check_second_moment_mc", "check_second_moment_enum",
        "check_chain_law", "check_sqnorm_enum", "check_sqnorm_mc", "check_optimal_probs",
        "check_optimal_probs_grid", "check_covariance_enum", "check_covariance_mc", "check_jensen",
        "check_taylor", "check_upper_bound", "check_risk_factor",
    )

    def run(self):
        return [getattr(self, name)() for name in self.CHECKS]


def write_report(results, text_path=None, json_path=None):
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([asdict(r) for r in results], fh, indent=2)
            fh.write("\n")
    return lines
