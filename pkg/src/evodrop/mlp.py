"""A small dense network (affine -> ReLU -> dropout -> ... -> softmax) trained with momentum SGD.

Dropout layers support Bernoulli noise, uniform multinomial noise and
evolutional dropout, whose probabilities are recomputed from the current
mini-batch of layer outputs on every forward pass.  Every example in the
batch gets its own mask row; the probabilities are constants for the
backward pass, which just multiplies the upstream gradient by the mask.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import DegenerateDistributionError, check_random_state
from .dropout import (
    SamplingDistribution,
    StandardDropoutSpec,
    minibatch_probs,
    resolve_trials,
    sample_multinomial_mask,
    sample_standard_mask,
)
from .trace import Stopwatch, TraceRow, TrainingTrace

log = logging.getLogger(__name__)

LR_GRID = (0.001, 0.005, 0.01, 0.1)
DEEP_DROPOUT_MODES = ("standard", "uniform", "evolutional")


class Affine:
    kind = "affine"

    def __init__(self, d_in, d_out, init_std=0.01, rng=None):
        rng = check_random_state(rng)
        self.d_in, self.d_out = d_in, d_out
        self.W = rng.normal(0.0, init_std, size=(d_in, d_out))
        self.b = np.zeros(d_out)

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, X):
        return X @ self.W + self.b

    def backward(self, X, grad_out):
        return grad_out @ self.W.T, [X.T @ grad_out, grad_out.sum(axis=0)]


class ReLU:
    kind = "relu"
    params = []

    def forward(self, X):
        return np.maximum(X, 0.0)

    def backward(self, X, grad_out):
        return grad_out * (X > 0), []


class Dropout:
    """Dropout site; ``mode`` is ``standard`` (uses ``delta``), ``uniform`` or ``evolutional`` (use ``k``)."""

    kind = "dropout"
    params = []

    def __init__(self, mode="evolutional", delta=0.5, k=0.5):
        if mode not in DEEP_DROPOUT_MODES:
            raise ValueError(f"unknown dropout mode {mode!r}; expected one of {DEEP_DROPOUT_MODES}")
        self.mode = mode
        self.delta = delta
        self.k = k
        if mode == "standard":
            StandardDropoutSpec(delta)

    def probabilities(self, X):
        d = X.shape[1]
        if self.mode == "uniform":
            return np.full(d, 1.0 / d)
        try:
            return minibatch_probs(X)
        except DegenerateDistributionError:
            log.warning("all-zero activations at an evolutional dropout layer; using uniform p")
            return np.full(d, 1.0 / d)

    def sample(self, X, rng):
        """Return ``(mask, probabilities)`` for the batch ``X``; one mask row per example."""
        m, d = X.shape
        if self.mode == "standard":
            return sample_standard_mask(self.delta, d, rng, size=m), None
        p = self.probabilities(X)
        dist = SamplingDistribution(p, resolve_trials(self.k, d))
        return sample_multinomial_mask(dist, rng, size=m), p


class SoftmaxCrossEntropy:
    kind = "softmax-xent"
    params = []

    @staticmethod
    def probabilities(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def loss(logits, y):
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        return float(np.mean(logsum - z[np.arange(len(y)), y]))

    def backward(self, logits, y):
        g = self.probabilities(logits)
        g[np.arange(len(y)), y] -= 1.0
        return g / len(y)


@dataclass
class ForwardCache:
    inputs: list
    logits: np.ndarray
    masks: dict = field(default_factory=dict)
    probabilities: dict = field(default_factory=dict)
    loss: float | None = None
    token: int = 0


class FeedForwardNet:
    """Ordered list of layers ending in exactly one softmax cross-entropy layer."""

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers or self.layers[-1].kind != "softmax-xent":
            raise ValueError("the last layer must be softmax cross-entropy")
        if any(l.kind == "softmax-xent" for l in self.layers[:-1]):
            raise ValueError("exactly one terminal softmax cross-entropy layer is allowed")
        width = None
        for layer in self.layers:
            if layer.kind == "affine":
                if width is not None and layer.d_in != width:
                    raise ValueError(f"affine layer expects {layer.d_in} inputs, previous width is {width}")
                width = layer.d_out
        self._token = 0

    @property
    def parameters(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def sizes(self):
        affine = [l for l in self.layers if l.kind == "affine"]
        return [affine[0].d_in] + [l.d_out for l in affine]

    def forward(self, X, y=None, train=False, rng=None, masks=None):
        """Run the batch through the net.

        In train mode each dropout layer samples a fresh mask per example
        unless ``masks`` supplies a fixed one for that layer index.  In infer
        mode dropout layers are the identity.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("forward needs a non-empty 2-d batch")
        masks = {} if masks is None else masks
        rng = check_random_state(rng) if train and rng is not None else rng
        inputs = []
        out_masks, out_probs = {}, {}
        h = X
        for i, layer in enumerate(self.layers[:-1]):
            inputs.append(h)
            if layer.kind == "dropout":
                if not train:
                    continue
                if i in masks:
                    mask = np.asarray(masks[i], dtype=np.float64)
                    if mask.shape != h.shape:
                        raise ValueError(f"fixed mask for layer {i} has shape {mask.shape}, expected {h.shape}")
                    p = None
                else:
                    if rng is None:
                        raise ValueError("train-mode forward with dropout needs a random source")
                    mask, p = layer.sample(h, rng)
                out_masks[i], out_probs[i] = mask, p
                h = h * mask
            else:
                h = layer.forward(h)
        self._token += 1
        cache = ForwardCache(inputs, h, out_masks, out_probs, token=self._token)
        if y is not None:
            cache.loss = self.layers[-1].loss(h, y)
        return cache

    def backward(self, cache, y):
        """Gradients for :attr:`parameters`, in the same order."""
        if cache.token != self._token:
            raise RuntimeError("stale forward cache: the net ran another forward pass since")
        grad = self.layers[-1].backward(cache.logits, y)
        grads = []
        for i in range(len(self.layers) - 2, -1, -1):
            layer = self.layers[i]
            if layer.kind == "dropout":
                if i in cache.masks:
                    grad = grad * cache.masks[i]
                continue
            grad, pgrads = layer.backward(cache.inputs[i], grad)
            grads = pgrads + grads
        return grads

    def predict_proba(self, X, batch_size=4096):
        X = np.asarray(X, dtype=np.float64)
        out = [SoftmaxCrossEntropy.probabilities(self.forward(X[i:i + batch_size]).logits)
               for i in range(0, X.shape[0], batch_size)]
        return np.vstack(out)

    def logits(self, X, batch_size=4096):
        X = np.asarray(X, dtype=np.float64)
        return np.vstack([self.forward(X[i:i + batch_size]).logits for i in range(0, X.shape[0], batch_size)])


def build_net(sizes=(784, 150, 10), dropout_mode="evolutional", delta=0.5, k=0.5,
              dropout_on=None, init_std=0.01, rng=None):
    """Dense ReLU net; dropout follows the ReLU of each hidden layer index in ``dropout_on``.

    ``dropout_on`` defaults to every hidden layer; pass ``()`` or set
    ``dropout_mode=None`` for no dropout.
    """
    rng = check_random_state(rng)
    n_hidden = len(sizes) - 2
    dropout_on = range(n_hidden) if dropout_on is None else dropout_on
    layers = []
    for j in range(len(sizes) - 1):
        layers.append(Affine(sizes[j], sizes[j + 1], init_std, rng))
        if j < n_hidden:
            layers.append(ReLU())
            if dropout_mode is not None and j in dropout_on:
                layers.append(Dropout(dropout_mode, delta, k))
    layers.append(SoftmaxCrossEntropy())
    return FeedForwardNet(layers)


@dataclass
class MomentumState:
    velocity: list
    mu: float = 0.9

    @classmethod
    def zeros_like(cls, params, mu=0.9):
        return cls([np.zeros_like(p) for p in params], mu)


def sgd_momentum_update(params, grads, state, eta):
    """``v <- mu v - eta g``; ``theta <- theta + v``, in place."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ValueError("parameter, gradient and velocity lists differ in length")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.mu
        v -= eta * g
        p += v
    return params, state


def classification_metrics(net, X, y):
    """Clean (infer-mode) error rate and mean cross-entropy."""
    logits = net.logits(X)
    err = float(np.mean(np.argmax(logits, axis=1) != y))
    return err, SoftmaxCrossEntropy.loss(logits, y)


@dataclass(frozen=True)
class EpochSchedule:
    """Constant learning rate with an optional single x``factor`` drop at ``drop_epoch``."""

    base: float
    drop_epoch: int | None = None
    factor: float = 0.1

    def __call__(self, epoch):
        if self.drop_epoch is not None and epoch >= self.drop_epoch:
            return self.base * self.factor
        return self.base


def train_deep(net, train, epochs, batch_size=128, schedule=0.1, momentum=0.9, rng=None,
               test=None, eval_every=1, timing=False):
    """Mini-batch momentum SGD; one permutation per epoch, last partial batch kept.

    ``epoch`` in the schedule is 0-based.  Trace rows are recorded at epoch 0
    (before training), every ``eval_every`` epochs and after the last one.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if not isinstance(schedule, EpochSchedule):
        schedule = EpochSchedule(float(schedule))
    rng = check_random_state(rng)
    X, y = train.dense(), np.asarray(train.y, dtype=np.int64)
    state = MomentumState.zeros_like(net.parameters, momentum)
    trace = TrainingTrace()
    clock = Stopwatch()

    def record(epoch):
        tr = classification_metrics(net, X, y)
        te = classification_metrics(net, test.dense(), np.asarray(test.y, dtype=np.int64)) \
            if test is not None else (None, None)
        trace.append(TraceRow(epoch, tr[0], tr[1], te[0], te[1], clock.elapsed_ms() if timing else None))

    record(0)
    n = X.shape[0]
    for epoch in range(epochs):
        eta = schedule(epoch)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache = net.forward(X[idx], y[idx], train=True, rng=rng)
            grads = net.backward(cache, y[idx])
            sgd_momentum_update(net.parameters, grads, state, eta)
        if (eval_every and (epoch + 1) % eval_every == 0) or epoch + 1 == epochs:
            record(epoch + 1)
    return net, trace


def _relu_pattern(net, X, masks):
    cache = net.forward(X, train=True, masks=masks)
    return [cache.inputs[i] > 0 for i, l in enumerate(net.layers[:-1]) if l.kind == "relu"]


def grad_check(net, X, y, masks, probes=50, step=1e-3, rng=None, max_resample=100, floor=1e-6):
    """Max relative error between backprop and finite differences on random parameter entries.

    ``masks`` fixes every dropout layer's mask (``{layer_index: matrix}``).
    The numeric derivative uses the fourth-order five-point stencil.  A
    probe whose perturbations flip any ReLU input sign is a kink and is
    redrawn.  Relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps near-zero gradients, where only rounding noise is left,
    from dominating the maximum.
    """
    rng = check_random_state(rng)
    for i, layer in enumerate(net.layers):
        if layer.kind == "dropout" and i not in masks:
            raise ValueError(f"grad_check needs a fixed mask for dropout layer {i}")
    cache = net.forward(X, y, train=True, masks=masks)
    analytic = net.backward(cache, y)
    params = net.parameters
    base_pattern = _relu_pattern(net, X, masks)
    offsets = (2.0, 1.0, -1.0, -2.0)
    worst = 0.0
    for _ in range(probes):
        for _attempt in range(max_resample):
            which = int(rng.integers(len(params)))
            flat = params[which].reshape(-1)
            pos = int(rng.integers(flat.size))
            old = flat[pos]
            losses = []
            kink = False
            for c in offsets:
                flat[pos] = old + c * step
                losses.append(net.forward(X, y, train=True, masks=masks).loss)
                kink = kink or any(np.any(a != b) for a, b in zip(_relu_pattern(net, X, masks), base_pattern))
            flat[pos] = old
            if not kink:
                break
        else:
            raise RuntimeError("could not find a probe away from ReLU kinks")
        f2, f1, m1, m2 = losses
        numeric = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * step)
        a = float(analytic[which].reshape(-1)[pos])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


# checkpoint layout (all little-endian):
#   magic b"EVODNET\0", u32 version, u32 layer count, then per layer a u8 type code and
#   affine: u32 d_in, u32 d_out | dropout: u8 mode code, f64 delta, f64 k, u8 k_is_fraction
#   followed by every affine layer's W (d_in x d_out, row-major) then b as f64.
CHECKPOINT_MAGIC = b"EVODNET\x00"
CHECKPOINT_VERSION = 1
_KIND_CODES = {"affine": 1, "relu": 2, "dropout": 3, "softmax-xent": 4}
_MODE_CODES = {m: i for i, m in enumerate(DEEP_DROPOUT_MODES)}


def save_checkpoint(net, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(net.layers)))
        for layer in net.layers:
            fh.write(struct.pack("<B", _KIND_CODES[layer.kind]))
            if layer.kind == "affine":
                fh.write(struct.pack("<II", layer.d_in, layer.d_out))
            elif layer.kind == "dropout":
                is_fraction = isinstance(layer.k, float)
                fh.write(struct.pack("<BddB", _MODE_CODES[layer.mode], layer.delta, float(layer.k),
                                     int(is_fraction)))
        for p in net.parameters:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, n_layers = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    codes = {v: k for k, v in _KIND_CODES.items()}
    modes = {v: k for k, v in _MODE_CODES.items()}
    layers = []
    for _ in range(n_layers):
        (code,) = struct.unpack_from("<B", data, off)
        off += 1
        kind = codes[code]
        if kind == "affine":
            d_in, d_out = struct.unpack_from("<II", data, off)
            off += 8
            layers.append(Affine(d_in, d_out, 0.0, 0))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "dropout":
            mode, delta, k, frac = struct.unpack_from("<BddB", data, off)
            off += struct.calcsize("<BddB")
            layers.append(Dropout(modes[mode], delta, k if frac else int(k)))
        else:
            layers.append(SoftmaxCrossEntropy())
    net = FeedForwardNet(layers)
    for p in net.parameters:
        n = p.size
        p[...] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(p.shape)
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after parameters")
    return net


class DropoutMLPClassifier(ClassifierMixin, BaseEstimator):
    """Dense ReLU classifier with dropout after each hidden layer.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    dropout : {"evolutional", "uniform", "standard"} or None
    delta : float
        Drop probability for standard dropout.
    k : int or float
        Multinomial trials per mask; a float is a fraction of the layer width.
    learning_rate : float
    lr_drop_epoch : int or None
        Epoch at which the learning rate is multiplied by 0.1.
    momentum, batch_size, epochs, init_std : training settings.
    random_state : int, Generator or None
    """

    def __init__(self, hidden_layer_sizes=(150,), dropout="evolutional", delta=0.5, k=0.5,
                 learning_rate=0.1, lr_drop_epoch=None, momentum=0.9, batch_size=128, epochs=20,
                 init_std=0.01, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.dropout = dropout
        self.delta = delta
        self.k = k
        self.learning_rate = learning_rate
        self.lr_drop_epoch = lr_drop_epoch
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.init_std = init_std
        self.random_state = random_state

    def fit(self, X, y):
        from .datasets import Dataset

        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        rng = check_random_state(self.random_state)
        sizes = (X.shape[1],) + tuple(self.hidden_layer_sizes) + (self.classes_.size,)
        self.net_ = build_net(sizes, self.dropout, self.delta, self.k, init_std=self.init_std, rng=rng)
        _, self.trace_ = train_deep(self.net_, Dataset(X, encoded), self.epochs, self.batch_size,
                                    EpochSchedule(self.learning_rate, self.lr_drop_epoch),
                                    self.momentum, rng)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return self.net_.predict_proba(check_array(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
