"""Side-by-side dropout comparisons and the averaged-iterate convergence trend.

Compared methods always share seeds, data order and evaluation cadence;
only the mask law differs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .linear import STEP_SIZE_GRID, DropoutConfig, StepSizeSchedule, evaluate, train_shallow
from .mlp import LR_GRID, build_net, train_deep
from .theory import expected_masked_sqnorm_closed


def trace_csv_bytes(trace):
    buf = io.StringIO()
    trace.to_csv(buf)
    return buf.getvalue().encode()


def steps_to_reach(trace, column, target):
    step = trace.first_step_reaching(column, target)
    return math.inf if step is None else step


@dataclass
class Comparison:
    """Outcome of a baseline-vs-proposed comparison over several seeds.

    ``runs[method][lr][seed]`` holds every trace; ``best_lr[method]`` is the
    grid value with the lowest median final training value of ``column``.
    """

    baseline: str
    proposed: str
    column: str
    seeds: tuple
    runs: dict = field(default_factory=dict)
    best_lr: dict = field(default_factory=dict)

    def best_trace(self, method, seed):
        return self.runs[method][self.best_lr[method]][seed]

    def select(self):
        for method, by_lr in self.runs.items():
            def key(lr):
                finals = [getattr(t.rows[-1], self.column) for t in by_lr[lr].values()]
                return (float(np.median(finals)), -lr)
            self.best_lr[method] = min(by_lr, key=key)
        return self

    def per_seed(self):
        """Per seed: target (baseline final value), steps for baseline and proposed, and finals."""
        rows = []
        for seed in self.seeds:
            base = self.best_trace(self.baseline, seed)
            prop = self.best_trace(self.proposed, seed)
            target = getattr(base.rows[-1], self.column)
            rows.append({
                "seed": seed,
                "target": target,
                "baseline_steps": steps_to_reach(base, self.column, target),
                "proposed_steps": steps_to_reach(prop, self.column, target),
                "baseline_final": target,
                "proposed_final": getattr(prop.rows[-1], self.column),
                "baseline_test_err": base.rows[-1].test_err,
                "proposed_test_err": prop.rows[-1].test_err,
            })
        return rows

    def summary(self):
        rows = self.per_seed()
        ratios = [r["proposed_steps"] / r["baseline_steps"] for r in rows]
        out = {
            "baseline": self.baseline,
            "proposed": self.proposed,
            "column": self.column,
            "best_lr": dict(self.best_lr),
            "per_seed": rows,
            "median_steps_ratio": float(np.median(ratios)),
            "median_baseline_steps": float(np.median([r["baseline_steps"] for r in rows])),
            "median_proposed_steps": float(np.median([r["proposed_steps"] for r in rows])),
        }
        test_b = [r["baseline_test_err"] for r in rows]
        if all(v is not None for v in test_b):
            out["median_baseline_test_err"] = float(np.median(test_b))
            out["median_proposed_test_err"] = float(np.median([r["proposed_test_err"] for r in rows]))
        return out


def compare_shallow(data, n_steps, eval_every, seeds=(0,), delta=0.5, grid=STEP_SIZE_GRID,
                    test=None, methods=("standard", "data-dependent")):
    """Standard dropout (drop rate ``delta``) against multinomial dropout with ``k = ceil((1-delta) d)``."""
    k = math.ceil((1.0 - delta) * data.d - 1e-9)
    comp = Comparison(methods[0], methods[1], "train_loss", tuple(seeds))
    for method in methods:
        config = DropoutConfig(method, delta=delta, k=k)
        comp.runs[method] = {
            eta: {seed: train_shallow(data, config, StepSizeSchedule(eta), n_steps, eval_every,
                                      rng=seed, test=test).trace for seed in seeds}
            for eta in grid
        }
    return comp.select()


def compare_deep(train, test, epochs, seeds=(0,), sizes=(784, 150, 10), delta=0.5, k=0.5,
                 grid=LR_GRID, batch_size=128, momentum=0.9, init_std=0.01,
                 methods=("standard", "evolutional")):
    """Standard against multinomial dropout on the hidden layers of a dense net.

    The network initialisation and the data/mask random stream are both
    derived from the seed, so compared methods start from the same weights.
    """
    comp = Comparison(methods[0], methods[1], "train_err", tuple(seeds))
    for method in methods:
        comp.runs[method] = {}
        for lr in grid:
            comp.runs[method][lr] = {}
            for seed in seeds:
                net = build_net(sizes, method, delta, k, init_std=init_std, rng=[seed, 0])
                _, trace = train_deep(net, train, epochs, batch_size, lr, momentum,
                                      rng=[seed, 1], test=test)
                comp.runs[method][lr][seed] = trace
    return comp.select()


def risk_bound_step_size(data, dist, radius, n):
    """Step size ``r / (G B sqrt(n))`` with ``G = 1`` (logistic loss) and ``B^2`` from the closed form."""
    B = math.sqrt(expected_masked_sqnorm_closed(data.second_moments, dist))
    return radius / (B * math.sqrt(n))


def convergence_trend(data, horizons=(1000, 4000, 16000), seeds=(0, 1, 2, 3, 4), mode="data-dependent",
                      k=0.5, reference_steps=256000, reference_eta=0.005):
    """Excess clean training loss of the averaged iterate against a long-run reference.

    The reference is the averaged iterate of one run of ``reference_steps``
    steps at constant step size ``reference_eta``.  Each horizon ``n`` uses
    the step size ``r / (B sqrt(n))`` with ``r`` the reference norm.  Returns ``{n: [excess per seed]}`` and the
    reference loss.
    """
    config = DropoutConfig(mode, k=k)
    dist = config.distribution(data)
    w_ref = train_shallow(data, config, reference_eta, reference_steps, rng=10_000).model.w_avg
    radius = max(float(np.linalg.norm(w_ref)), 1e-12)
    _, ref_loss = evaluate(w_ref, data)
    out = {}
    for n in horizons:
        eta = risk_bound_step_size(data, dist, radius, n)
        out[n] = [evaluate(train_shallow(data, config, eta, n, rng=seed).model.w_avg, data)[1] - ref_loss
                  for seed in seeds]
    return out, ref_loss
