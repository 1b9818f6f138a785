import inspect
import io
import logging

import numpy as np
import pytest
from sklearn.base import clone

from evodrop.datasets import Dataset
from evodrop.mlp import (
    Affine,
    Dropout,
    DropoutMLPClassifier,
    EpochSchedule,
    FeedForwardNet,
    MomentumState,
    ReLU,
    SoftmaxCrossEntropy,
    build_net,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_update,
    train_deep,
)


def toy(n=40, d=20, classes=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.integers(0, classes, size=n)


def fixed_masks(net, X, rng):
    """One fresh sampled mask per dropout layer, frozen for finite differences."""
    cache = net.forward(X, train=True, rng=rng)
    return dict(cache.masks)


class TestForward:
    def test_infer_mode_ignores_dropout(self):
        X, _ = toy()
        net = build_net((20, 10, 5), "evolutional", rng=0)
        plain = build_net((20, 10, 5), None, rng=0)
        assert np.array_equal(net.forward(X).logits, plain.forward(X).logits)

    def test_unit_masks_match_infer_bitwise(self):
        X, _ = toy()
        net = build_net((20, 10, 5), "evolutional", rng=1)
        ones = {i: np.ones((X.shape[0], 10)) for i, l in enumerate(net.layers) if l.kind == "dropout"}
        assert net.forward(X, train=True, masks=ones).logits.tobytes() == net.forward(X).logits.tobytes()

    def test_evolutional_hand_masks(self):
        layer = Dropout("evolutional", k=1)
        X = np.array([[1.0, 2.0], [-1.0, 2.0]])
        mask, p = layer.sample(X, np.random.default_rng(0))
        assert np.allclose(p, [1 / 3, 2 / 3])
        rows = {tuple(np.round(r, 12)) for r in mask}
        assert rows <= {(3.0, 0.0), (0.0, 1.5)}

    def test_mask_rows_sum_to_k(self):
        layer = Dropout("evolutional", k=4)
        X = np.abs(np.random.default_rng(0).standard_normal((30, 10)))
        mask, p = layer.sample(X, np.random.default_rng(1))
        counts = mask * 4 * p
        assert np.allclose(counts.sum(axis=1), 4)

    def test_evolutional_unbiased_for_fixed_batch(self):
        X = np.abs(np.random.default_rng(2).standard_normal((3, 6))) + 0.1
        layer = Dropout("evolutional", k=3)
        rng = np.random.default_rng(3)
        draws = np.array([layer.sample(X, rng)[0] * X for _ in range(20_000)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - X) <= 4 * se + 1e-12)

    def test_all_zero_batch_falls_back_to_uniform(self, caplog):
        layer = Dropout("evolutional", k=2)
        with caplog.at_level(logging.WARNING):
            p = layer.probabilities(np.zeros((4, 5)))
        assert np.allclose(p, 0.2) and "uniform" in caplog.text

    def test_train_mode_needs_rng(self):
        net = build_net((4, 3, 2), "standard", rng=0)
        with pytest.raises(ValueError):
            net.forward(np.ones((2, 4)), train=True)

    def test_layer_width_checked(self):
        with pytest.raises(ValueError):
            FeedForwardNet([Affine(4, 3), ReLU(), Affine(2, 2), SoftmaxCrossEntropy()])
        with pytest.raises(ValueError):
            FeedForwardNet([Affine(4, 3)])


class TestBackward:
    def test_zero_mask_row_blocks_gradient(self):
        X, y = toy(n=4)
        net = build_net((20, 10, 5), "standard", rng=0)
        site = next(i for i, l in enumerate(net.layers) if l.kind == "dropout")
        mask = np.ones((4, 10))
        mask[1] = 0
        cache = net.forward(X, y, train=True, masks={site: mask})
        grads = net.backward(cache, y)
        # upstream of the mask, example 1 contributes nothing: compare with the batch without it
        keep = [0, 2, 3]
        sub = net.forward(X[keep], y[keep], train=True, masks={site: mask[keep]})
        sub_grads = net.backward(sub, y[keep])
        assert np.allclose(grads[0] * 4, sub_grads[0] * 3, atol=1e-14)

    def test_unit_mask_equals_plain_net(self):
        X, y = toy()
        net = build_net((20, 10, 5), "evolutional", rng=4)
        plain = build_net((20, 10, 5), None, rng=4)
        ones = {2: np.ones((X.shape[0], 10))}
        g1 = net.backward(net.forward(X, y, train=True, masks=ones), y)
        g2 = plain.backward(plain.forward(X, y, train=True), y)
        assert all(np.array_equal(a, b) for a, b in zip(g1, g2))

    def test_mask_scales_upstream_gradient_elementwise(self):
        X, y = toy(n=3)
        net = build_net((20, 10, 5), "standard", rng=5)
        rng = np.random.default_rng(0)
        mask = rng.uniform(0.5, 2, size=(3, 10))
        cache = net.forward(X, y, train=True, masks={2: mask})
        # gradient w.r.t. the dropout input equals mask * gradient w.r.t. its output
        head = FeedForwardNet(net.layers[3:])
        h_out = cache.inputs[2] * mask
        hc = head.forward(h_out, y)
        d_out = head.layers[-1].backward(hc.logits, y) @ head.layers[0].W.T
        grads = net.backward(cache, y)
        relu_in = cache.inputs[1]
        expected_W1 = X.T @ ((d_out * mask) * (relu_in > 0))
        assert np.allclose(grads[0], expected_W1, atol=1e-14)

    def test_stale_cache_rejected(self):
        X, y = toy(n=4)
        net = build_net((20, 10, 5), None, rng=0)
        cache = net.forward(X, y)
        net.forward(X, y)
        with pytest.raises(RuntimeError):
            net.backward(cache, y)


class TestGradCheck:
    def test_relu_net_with_masks(self):
        X, y = toy(n=16)
        net = build_net((20, 10, 5), "evolutional", init_std=0.5, rng=0)
        masks = fixed_masks(net, X, np.random.default_rng(1))
        assert grad_check(net, X, y, masks, probes=100, rng=2) <= 1e-5

    def test_linear_net_near_rounding_floor(self):
        X, y = toy(n=8)
        rng = np.random.default_rng(0)
        net = FeedForwardNet([Affine(20, 10, 0.5, rng), Dropout("uniform", k=5), Affine(10, 5, 0.5, rng),
                              SoftmaxCrossEntropy()])
        masks = fixed_masks(net, X, np.random.default_rng(1))
        # softmax cross-entropy is not quadratic, so rounding sets the floor here
        assert grad_check(net, X, y, masks, probes=100, rng=3) <= 1e-6

    def test_needs_fixed_masks(self):
        X, y = toy(n=4)
        net = build_net((20, 10, 5), "standard", rng=0)
        with pytest.raises(ValueError):
            grad_check(net, X, y, {})


class TestMomentum:
    def test_plain_sgd_when_mu_zero(self):
        p, g = [np.array([1.0, 2.0])], [np.array([0.5, -1.0])]
        sgd_momentum_update(p, g, MomentumState.zeros_like(p, 0.0), 0.1)
        assert np.allclose(p[0], [0.95, 2.1])

    def test_velocity_decays(self):
        p = [np.zeros(1)]
        state = MomentumState([np.array([1.0])], 0.5)
        for _ in range(3):
            sgd_momentum_update(p, [np.zeros(1)], state, 1.0)
        assert state.velocity[0][0] == 0.125

    def test_two_step_hand_value(self):
        g = np.array([1.0, -2.0])
        p = [np.zeros(2)]
        state = MomentumState.zeros_like(p, 0.9)
        sgd_momentum_update(p, [g], state, 1.0)
        sgd_momentum_update(p, [g], state, 1.0)
        assert np.allclose(p[0], -g * 2.9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_update([np.zeros(2)], [np.zeros(3)], MomentumState([np.zeros(2)]), 0.1)


class TestTraining:
    def test_zero_epochs_leaves_parameters(self):
        X, y = toy()
        net = build_net((20, 10, 5), "evolutional", rng=0)
        before = [p.copy() for p in net.parameters]
        _, trace = train_deep(net, Dataset(X, y), 0, rng=0)
        assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters))
        assert len(trace) == 1

    def test_defaults(self):
        sig = inspect.signature(train_deep)
        assert sig.parameters["batch_size"].default == 128
        assert sig.parameters["momentum"].default == 0.9
        assert inspect.signature(build_net).parameters["init_std"].default == 0.01

    def test_seeded_trace_identical(self):
        X, y = toy(n=200)
        out = []
        for _ in range(2):
            net = build_net((20, 10, 5), "evolutional", rng=[1, 0])
            _, trace = train_deep(net, Dataset(X, y), 3, 32, 0.1, rng=[1, 1])
            buf = io.StringIO()
            trace.to_csv(buf)
            out.append(buf.getvalue())
        assert out[0] == out[1]

    def test_learns_toy_problem(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((300, 20))
        y = (X[:, 0] > 0).astype(int) + 2 * (X[:, 1] > 0).astype(int)
        net = build_net((20, 10, 4), "evolutional", init_std=0.1, rng=0)
        _, trace = train_deep(net, Dataset(X, y), 15, 32, 0.1, rng=1)
        assert trace.rows[-1].train_err < 0.3 < trace.rows[0].train_err

    def test_schedule_drop(self):
        sched = EpochSchedule(0.1, drop_epoch=5)
        assert sched(4) == 0.1 and sched(5) == pytest.approx(0.01)

    def test_multiple_dropout_layers(self):
        net = build_net((8, 6, 6, 3), "evolutional", rng=0)
        assert sum(l.kind == "dropout" for l in net.layers) == 2
        cache = net.forward(np.ones((4, 8)), train=True, rng=0)
        assert len(cache.masks) == 2


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = build_net((20, 10, 5), "evolutional", k=0.5, rng=0)
        save_checkpoint(net, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.sizes == net.sizes
        assert all(np.array_equal(a, b) for a, b in zip(net.parameters, back.parameters))
        X, _ = toy()
        assert np.array_equal(net.forward(X).logits, back.forward(X).logits)
        site = next(l for l in back.layers if l.kind == "dropout")
        assert site.mode == "evolutional" and site.k == 0.5

    def test_integer_k_and_standard(self, tmp_path):
        net = build_net((6, 4, 2), "standard", delta=0.3, rng=0)
        net.layers[2].k = 3
        save_checkpoint(net, tmp_path / "c.bin")
        site = load_checkpoint(tmp_path / "c.bin").layers[2]
        assert site.mode == "standard" and site.delta == 0.3 and site.k == 3 and isinstance(site.k, int)

    def test_corrupt_files(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad.bin")
        net = build_net((6, 4, 2), None, rng=0)
        save_checkpoint(net, tmp_path / "c.bin")
        (tmp_path / "c2.bin").write_bytes((tmp_path / "c.bin").read_bytes() + b"\0")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c2.bin")


class TestEstimator:
    def test_fit_predict_and_clone(self):
        X, y = toy(n=100, classes=3)
        clf = DropoutMLPClassifier(hidden_layer_sizes=(8,), epochs=2, random_state=0).fit(X, y)
        assert clf.predict(X).shape == (100,)
        assert np.allclose(clf.predict_proba(X).sum(axis=1), 1.0)
        assert clone(clf).get_params() == clf.get_params()
