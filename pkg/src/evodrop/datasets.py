"""Datasets: sparse text and IDX readers, a synthetic generator and Z-normalization."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dropout import second_moments

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-12


class FormatError(ValueError):
    """A data file does not follow its declared format."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Labeled examples; ``X`` is a dense array or a CSR matrix of shape (n, d)."""

    X: np.ndarray | sp.csr_matrix
    y: np.ndarray
    name: str = ""
    info: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if sp.issparse(self.X):
            self.X = sp.csr_matrix(self.X, dtype=np.float64)
        else:
            self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.X.shape[0]} feature rows but {self.y.shape[0]} labels")

    def __len__(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def is_sparse(self):
        return sp.issparse(self.X)

    @cached_property
    def second_moments(self):
        return second_moments(self.X)

    @cached_property
    def means(self):
        return np.asarray(self.X.mean(axis=0)).ravel()

    def dense(self):
        return self.X.toarray() if self.is_sparse else self.X

    def subset(self, index):
        return Dataset(self.X[index], self.y[index], name=self.name)


def _open(path, mode="rb"):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_sparse_text(path, n_features=None, binary=True):
    """Read ``label idx:val idx:val ...`` lines (1-based, strictly increasing indices).

    With ``binary=True`` positive labels map to +1 and the rest to -1.
    """
    indptr = [0]
    indices = []
    values = []
    labels = []
    with _open(path, "rt") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *pairs = line.split()
            try:
                label = float(head)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad label {head!r}") from None
            last = 0
            for pair in pairs:
                idx_s, sep, val_s = pair.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: malformed feature {pair!r}") from None
                if idx <= last:
                    raise FormatError(f"{path}:{lineno}: index {idx} not strictly increasing (or < 1)")
                last = idx
                indices.append(idx - 1)
                values.append(val)
            labels.append(label)
            indptr.append(len(indices))
    if not labels:
        raise EmptyDatasetError(f"{path}: no examples")
    seen = max(indices) + 1 if indices else 0
    d = seen if n_features is None else n_features
    if d < seen:
        raise FormatError(f"{path}: feature index {seen} exceeds declared dimension {d}")
    X = sp.csr_matrix((np.array(values), np.array(indices, dtype=np.int64), np.array(indptr)),
                      shape=(len(labels), d))
    y = np.array(labels)
    if binary:
        y = np.where(y > 0, 1, -1)
    elif np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return Dataset(X, y, name=Path(path).name)


def write_sparse_text(dataset, path):
    """Write ``dataset`` in the sparse text format; values keep full double precision."""
    X = sp.csr_matrix(dataset.X)
    with _open(path, "wt") as fh:
        for i in range(X.shape[0]):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            order = np.argsort(X.indices[lo:hi], kind="stable")
            label = dataset.y[i]
            parts = [str(int(label)) if float(label).is_integer() else repr(float(label))]
            parts += [f"{X.indices[lo + j] + 1}:{float(X.data[lo + j])!r}" for j in order
                      if X.data[lo + j] != 0]
            fh.write(" ".join(parts) + "\n")


def _read_header(fh, magic, ndims, path):
    header = fh.read(4 + 4 * ndims)
    if len(header) < 4 + 4 * ndims:
        raise FormatError(f"{path}: truncated header")
    got, *dims = struct.unpack(f">I{ndims}I", header)
    if got != magic:
        raise FormatError(f"{path}: magic number {got:#010x}, expected {magic:#010x}")
    return dims


def read_idx(images_path, labels_path):
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by 1/255."""
    with _open(images_path) as fh:
        count, rows, cols = _read_header(fh, IDX_IMAGES_MAGIC, 3, images_path)
        pixels = fh.read()
    if len(pixels) < count * rows * cols:
        raise FormatError(f"{images_path}: header declares {count} images, "
                          f"found {len(pixels) // max(rows * cols, 1)}")
    with _open(labels_path) as fh:
        (n_labels,) = _read_header(fh, IDX_LABELS_MAGIC, 1, labels_path)
        raw_labels = fh.read()
    if len(raw_labels) < n_labels:
        raise FormatError(f"{labels_path}: header declares {n_labels} labels, found {len(raw_labels)}")
    if n_labels != count:
        raise FormatError(f"{count} images but {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8, count=count * rows * cols)
    X = images.reshape(count, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(raw_labels, dtype=np.uint8, count=count).astype(np.int64)
    return Dataset(X, y, name=Path(images_path).name)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with _open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with _open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def gen_synthetic(d, n, profile=("log-uniform", 1e-2, 1e2), label_noise=0.1, seed=0):
    """Gaussian features with prescribed second moments and linear-threshold labels.

    ``profile`` is either an explicit vector of second moments or
    ``("log-uniform", lo, hi)``, in which case the moments are drawn
    log-uniformly from ``[lo, hi]``.  Labels are ``sign(w^T x + noise)``
    with ``w ~ N(0, I)`` and noise standard deviation ``label_noise`` times
    the standard deviation of the clean score.
    """
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    rng = np.random.default_rng(seed)
    if isinstance(profile, str) or (isinstance(profile, tuple) and isinstance(profile[0], str)):
        kind, lo, hi = (profile, 1e-2, 1e2) if isinstance(profile, str) else profile
        if kind != "log-uniform" or not 0 < lo <= hi:
            raise ValueError(f"invalid moment profile {profile!r}")
        moments = np.exp(rng.uniform(np.log(lo), np.log(hi), size=d))
    else:
        moments = np.asarray(profile, dtype=np.float64)
        if moments.shape != (d,) or np.any(moments < 0) or not np.all(np.isfinite(moments)):
            raise ValueError(f"explicit profile must be {d} non-negative finite moments")
    X = rng.standard_normal((n, d)) * np.sqrt(moments)
    w_true = rng.standard_normal(d)
    score = X @ w_true
    noise_std = label_noise * np.sqrt(np.dot(w_true * w_true, moments))
    score = score + noise_std * rng.standard_normal(n)
    y = np.where(score >= 0, 1, -1)
    return Dataset(X, y, name=f"synthetic-d{d}-n{n}-seed{seed}",
                   info={"w_true": w_true, "moments": moments})


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def floored(self):
        return self.std <= STD_FLOOR

    def apply(self, X):
        X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)
        inv = np.where(self.floored, 0.0, 1.0 / np.maximum(self.std, STD_FLOOR))
        return (X - self.mean) * inv


def fit_normalization(X):
    X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyDatasetError("cannot normalize against an empty split")
    return NormalizationStats(mean=X.mean(axis=0), std=X.std(axis=0))


def z_normalize(dataset, stats=None):
    """Center and scale every feature; ``stats`` defaults to ones fitted on ``dataset``.

    Features whose standard deviation is at or below the floor map to 0.
    Sparse data is densified.
    """
    if stats is None:
        stats = fit_normalization(dataset.X)
    return Dataset(stats.apply(dataset.X), dataset.y, name=dataset.name), stats


class ZNormalizer(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`z_normalize`."""

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr")
        self.stats_ = fit_normalization(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.apply(check_array(X, accept_sparse="csr"))
