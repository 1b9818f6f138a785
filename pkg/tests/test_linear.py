import io
import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from evodrop.datasets import Dataset, EmptyDatasetError, gen_synthetic, z_normalize
from evodrop.linear import (
    STEP_SIZE_GRID,
    DropoutConfig,
    DropoutLogisticRegression,
    LinearModel,
    StepSizeSchedule,
    evaluate,
    logistic_loss,
    select_step_size,
    sgd_dropout_step,
    train_shallow,
)


def csv_bytes(trace):
    buf = io.StringIO()
    trace.to_csv(buf)
    return buf.getvalue()


class TestLoss:
    @pytest.mark.parametrize("y", [-1, 1])
    def test_symmetric_point(self, y):
        loss, deriv = logistic_loss(0.0, y)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        assert deriv == -y / 2

    def test_saturation(self):
        assert logistic_loss(50.0, 1)[0] < 1e-20
        assert logistic_loss(-50.0, -1)[0] < 1e-20

    def test_large_negative_margin(self):
        getcontext().prec = 50
        exact = float((Decimal(1) + Decimal(50).exp()).ln())
        loss, deriv = logistic_loss(-50.0, 1)
        assert loss == pytest.approx(exact, rel=1e-15)
        assert deriv == pytest.approx(-1.0, abs=1e-20)

    @given(st.floats(-30, 30), st.sampled_from([-1, 1]))
    def test_derivative_matches_finite_difference(self, z, y):
        h = 1e-5
        numeric = (logistic_loss(z + h, y)[0] - logistic_loss(z - h, y)[0]) / (2 * h)
        deriv = logistic_loss(z, y)[1]
        assert abs(deriv - numeric) <= 1e-8 * max(abs(deriv), abs(numeric), 1e-3)

    @given(st.floats(-1e3, 1e3), st.sampled_from([-1, 1]))
    def test_gradient_bounded_by_one(self, z, y):
        assert abs(logistic_loss(z, y)[1]) <= 1.0


class TestStep:
    def test_hand_update(self):
        model = LinearModel(2)
        sgd_dropout_step(model, np.array([1.0, 5.0]), 1, np.array([2.0, 0.0]), 0.1)
        assert np.allclose(model.w, [0.1, 0.0], atol=1e-15)

    def test_zero_mask_or_zero_rate(self):
        model = LinearModel(3)
        model.w[:] = [1.0, -2.0, 0.5]
        sgd_dropout_step(model, np.ones(3), -1, np.zeros(3), 0.1)
        sgd_dropout_step(model, np.ones(3), -1, np.ones(3), 0.0)
        assert np.array_equal(model.w, [1.0, -2.0, 0.5])

    def test_touches_only_support(self):
        model = LinearModel(6)
        touched = sgd_dropout_step(model, (np.array([1, 4]), np.array([2.0, 3.0])), 1,
                                   np.array([1.0, 0.0]), 0.5)
        assert touched.tolist() == [1]
        assert np.flatnonzero(model.w).tolist() == [1]

    def test_averaged_iterate_identity(self):
        rng = np.random.default_rng(0)
        model = LinearModel(4)
        stored = []
        for _ in range(37):
            stored.append(model.w.copy())
            idx = np.sort(rng.choice(4, size=rng.integers(1, 5), replace=False))
            model.update(idx, rng.standard_normal(idx.size))
        # w_1 = 0 is the first stored iterate; w_avg averages w_1..w_t
        assert np.allclose(model.w_avg, np.mean(stored, axis=0), atol=1e-10)


class TestEvaluate:
    def test_zero_weights(self):
        ds = gen_synthetic(3, 20, seed=0)
        err, loss = evaluate(np.zeros(3), ds)
        assert err == 1.0 and loss == pytest.approx(math.log(2))

    def test_separating_weights(self):
        ds = Dataset(np.array([[1.0], [2.0], [-1.0]]), np.array([1, 1, -1]))
        assert evaluate(np.array([1.0]), ds)[0] == 0.0

    def test_hand_built_error(self):
        ds = Dataset(np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -2.0]]), np.array([1, 1, -1, 1]))
        assert evaluate(np.array([1.0, 1.0]), ds)[0] == 0.25

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            evaluate(np.zeros(2), Dataset(np.zeros((0, 2)), np.zeros(0)))


class TestSchedule:
    def test_piecewise(self):
        sched = StepSizeSchedule(1.0, "piecewise", (10, 20), (0.5, 0.1))
        assert [sched(1), sched(10), sched(25)] == [1.0, 0.5, pytest.approx(0.05)]

    def test_invalid(self):
        with pytest.raises(ValueError):
            StepSizeSchedule(0.0)
        with pytest.raises(ValueError):
            StepSizeSchedule(1.0, "piecewise", (1,), ())


class TestTrainShallow:
    def test_zero_steps(self):
        res = train_shallow(gen_synthetic(4, 50, seed=0), DropoutConfig("standard"), 0.1, 0, rng=0)
        assert not np.any(res.model.w) and not np.any(res.model.w_avg)
        assert [r.step for r in res.trace] == [0]

    @pytest.mark.parametrize("mode", ["standard", "data-dependent"])
    def test_loss_trends_down_on_separable_data(self, mode):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((400, 2)) * [3.0, 0.5]
        y = np.where(X[:, 0] + X[:, 1] > 0, 1, -1)
        res = train_shallow(Dataset(X, y), DropoutConfig(mode, delta=0.5, k=1), 0.05, 4000, 500, rng=1)
        losses = res.trace.column("train_loss")
        assert losses[-1] < losses[0]
        assert np.all(np.diff(losses[1:]) <= 0.02)

    def test_normalized_data_uses_uniform_probabilities(self):
        data, _ = z_normalize(gen_synthetic(8, 300, seed=2))
        dist = DropoutConfig("data-dependent", k=0.5).distribution(data)
        assert np.allclose(dist.p, 1 / 8, atol=1e-12) and dist.k == 4

    def test_seeded_trace_bytes(self):
        data = gen_synthetic(10, 200, seed=1)
        runs = [train_shallow(data, DropoutConfig("data-dependent"), 0.01, 500, 100, rng=7) for _ in range(2)]
        assert csv_bytes(runs[0].trace) == csv_bytes(runs[1].trace)

    def test_sparse_and_dense_paths_agree_without_noise(self):
        data = gen_synthetic(6, 100, seed=3)
        sparse = Dataset(sp.csr_matrix(data.X), data.y)
        a = train_shallow(data, DropoutConfig("none"), 0.05, 300, rng=2, block=1)
        b = train_shallow(sparse, DropoutConfig("none"), 0.05, 300, rng=2)
        assert np.allclose(a.model.w_avg, b.model.w_avg, atol=1e-12)

    def test_sparse_dropout_stays_on_support(self):
        X = sp.random(200, 50, density=0.05, random_state=0, format="csr")
        X.data[:] = 1.0
        data = Dataset(X, np.where(np.arange(200) % 2 == 0, 1, -1))
        used = set(X.indices.tolist())
        res = train_shallow(data, DropoutConfig("data-dependent", k=5), 0.1, 1000, rng=0)
        assert set(np.flatnonzero(res.model.w).tolist()) <= used

    def test_last_iterate_report(self):
        data = gen_synthetic(5, 100, seed=0)
        res = train_shallow(data, DropoutConfig("standard"), 0.05, 200, rng=0, report="last")
        assert res.trace.rows[-1].train_loss == pytest.approx(evaluate(res.model.w, data)[1])

    def test_test_split_recorded(self):
        res = train_shallow(gen_synthetic(5, 100, seed=0), DropoutConfig("uniform", k=2), 0.05, 100, 50,
                            rng=0, test=gen_synthetic(5, 40, seed=1))
        assert all(r.test_err is not None for r in res.trace)

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            DropoutConfig("gaussian")

    def test_grid_selection(self):
        data = gen_synthetic(5, 200, seed=0)
        best, results = select_step_size(data, DropoutConfig("standard"), 300)
        assert set(results) == set(STEP_SIZE_GRID)
        assert results[best].trace.rows[-1].train_loss == min(r.trace.rows[-1].train_loss for r in results.values())


class TestEstimator:
    def test_fit_predict(self):
        data = gen_synthetic(5, 400, seed=0, label_noise=0.0)
        labels = np.where(data.y > 0, "pos", "neg")
        clf = DropoutLogisticRegression(n_steps=4000, eta=0.05, random_state=0).fit(data.X, labels)
        assert clf.score(data.X, labels) > 0.85
        assert set(clf.predict(data.X)) <= {"pos", "neg"}
        assert clf.predict_proba(data.X).shape == (400, 2)

    def test_params_and_clone(self):
        clf = DropoutLogisticRegression(dropout="standard", delta=0.3, k=7, eta=0.5, random_state=3)
        assert clone(clf).get_params() == clf.get_params()

    def test_sparse_input(self):
        X = sp.random(100, 20, density=0.2, random_state=0, format="csr")
        y = np.arange(100) % 2
        clf = DropoutLogisticRegression(n_steps=200, random_state=0).fit(X, y)
        assert clf.coef_.shape == (20,)

    def test_rejects_multiclass(self):
        with pytest.raises(ValueError):
            DropoutLogisticRegression(n_steps=10).fit(np.ones((3, 2)), [0, 1, 2])
