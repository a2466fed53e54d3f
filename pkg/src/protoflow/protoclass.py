"""Prototype initialisation, cosine classifier, and closed-form prototype flows.

Two probability models appear here. The *cosine* model is the classifier
actually used for prediction: ``softmax_k(gamma * cos(x, p_k))``. The
*Euclidean* model rescales each feature onto the sphere of radius
``|p_k|`` and uses ``softmax_k(-gamma * |z_ik - p_k|^2)``; on that sphere
squared distance is an affine function of cosine, which is what makes the
closed-form flow ``(y - P)(z - p)`` exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import ndcore as nd
from .episodes import Episode
from .exceptions import ConfigError, DomainError, ShapeError
from .ndcore import Tensor

PAPER = "paper"
EXACT = "exact"
EUCLIDEAN = "euclidean"
COSINE = "cosine"

ArrayLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class ClassifierConfig:
    gamma: float = 10.0
    radius: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError("gamma must be finite and positive")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ConfigError("radius must be finite and positive")


@dataclass
class PrototypeState:
    """Prototype matrix ``p(t)`` (N x d) at time ``t``."""

    prototypes: Tensor
    time: float = 0.0

    def __post_init__(self):
        if not isinstance(self.prototypes, Tensor):
            self.prototypes = Tensor(self.prototypes)
        if self.prototypes.ndim != 2:
            raise ShapeError(f"prototypes must be N x d, got {self.prototypes.shape}")
        if self.time < 0:
            raise ConfigError("time must be non-negative")
        if np.any(np.linalg.norm(self.prototypes.data, axis=1) == 0.0):
            raise DomainError("a prototype is the zero vector")

    @property
    def n_way(self) -> int:
        return self.prototypes.shape[0]


def _tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _prototypes(p) -> Tensor:
    return p.prototypes if isinstance(p, PrototypeState) else _tensor(p)


def _as_onehot(y, n_way: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        if np.any(y < 0) or np.any(y >= n_way):
            raise DomainError("unlabeled sample: labels must lie in [0, N)")
        return np.eye(n_way)[y]
    if y.shape[1] != n_way:
        raise ShapeError(f"label matrix has {y.shape[1]} columns, expected {n_way}")
    return np.asarray(y, dtype=np.float64)


def _check_labeled(onehot: np.ndarray) -> None:
    ok = np.all((onehot == 0.0) | (onehot == 1.0), axis=1) & (onehot.sum(axis=1) == 1.0)
    if not np.all(ok):
        raise DomainError("unlabeled sample: every row must be a one-hot label")


def init_prototypes(episode: Episode) -> PrototypeState:
    """Mean support feature of each class, at ``t = 0``."""
    n, d = episode.n_way, episode.dim
    sums = np.zeros((n, d))
    counts = np.zeros(n)
    for x, y in zip(episode.support_x, episode.support_y):
        sums[y] += x
        counts[y] += 1
    if np.any(counts == 0):
        raise DomainError("a class has no support samples")
    return PrototypeState(Tensor(sums / counts[:, None]), 0.0)


# -- cosine classifier -------------------------------------------------------

def cosine_logits(prototypes, x: ArrayLike, config: ClassifierConfig) -> Tensor:
    """``gamma * cos(x_i, p_k)`` as an (m, N) tensor."""
    p = _prototypes(prototypes)
    x = _tensor(x)
    if x.ndim == 1:
        x = nd.reshape(x, (1, -1))
    return nd.scale(nd.cosine_matrix(x, p), config.gamma)


def classify(state, x: ArrayLike, config: ClassifierConfig = ClassifierConfig()) -> Tensor:
    """Class probabilities; a vector input gives shape (N,), a matrix (m, N)."""
    single = (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == 1
    probs = nd.softmax(cosine_logits(state, x, config), axis=-1)
    return nd.reshape(probs, (probs.shape[1],)) if single else probs


def predict(state, x: ArrayLike, config: ClassifierConfig = ClassifierConfig()) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest class index."""
    with nd.no_grad():
        logits = cosine_logits(state, x, config).data
    return np.argmax(logits, axis=1)


def cross_entropy(state, x: ArrayLike, y, config: ClassifierConfig = ClassifierConfig()) -> Tensor:
    """Mean negative log-likelihood of labels ``y`` under the cosine classifier."""
    p = _prototypes(state)
    x = _tensor(x)
    if x.ndim == 1:
        x = nd.reshape(x, (1, -1))
    if x.shape[0] == 0:
        raise ShapeError("cross_entropy: empty batch")
    onehot = _as_onehot(y, p.shape[0])
    logp = nd.log_softmax(cosine_logits(p, x, config), axis=-1)
    return nd.scale(nd.reduce_sum(nd.mul(logp, Tensor(onehot))), -1.0 / x.shape[0])


# -- Euclidean form ----------------------------------------------------------

def euclid_from_cos(cos_ab: float, r: float) -> float:
    """Distance between two points on a radius-``r`` sphere with cosine ``cos_ab``."""
    if r <= 0:
        raise DomainError("radius must be positive")
    if abs(cos_ab) > 1.0 + 1e-12:
        raise DomainError(f"cosine {cos_ab} outside [-1, 1]")
    c = min(1.0, max(-1.0, float(cos_ab)))
    return float(np.sqrt(max(0.0, 2.0 * r * r - 2.0 * r * r * c)))


def sphere_features(x: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """``z[k, i] = x_i / |x_i| * radius[k]``, shape (N, m, d)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("zero-norm feature")
    unit = x / norms
    return np.asarray(radius)[:, None, None] * unit[None, :, :]


def euclidean_logits(prototypes, x: np.ndarray, config: ClassifierConfig, radius=None) -> Tensor:
    """``-gamma * |z_ik - p_k|^2`` with the sphere radius held constant.

    ``radius`` defaults to the current prototype norms, detached from the graph.
    """
    p = _prototypes(prototypes)
    n, d = p.shape
    if radius is None:
        radius = np.linalg.norm(p.data, axis=1)
    z = sphere_features(x, radius)
    m = z.shape[1]
    pb = nd.broadcast_to(nd.reshape(p, (n, 1, d)), (n, m, d))
    sq = nd.reduce_sum(nd.square(nd.sub(Tensor(z), pb)), axis=-1)
    return nd.scale(nd.transpose(sq), -config.gamma)


def euclidean_cross_entropy(prototypes, x: np.ndarray, y, config: ClassifierConfig = ClassifierConfig(),
                            radius=None) -> Tensor:
    p = _prototypes(prototypes)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    onehot = _as_onehot(y, p.shape[0])
    logp = nd.log_softmax(euclidean_logits(p, x, config, radius), axis=-1)
    return nd.scale(nd.reduce_sum(nd.mul(logp, Tensor(onehot))), -1.0 / x.shape[0])


# -- closed-form flows -------------------------------------------------------

def discrepancy_flow(x: ArrayLike, prototypes: Tensor, part1: Tensor) -> Tensor:
    """``(1/m) sum_i part1[i, k] * (x_i - p_k)`` for every class ``k``.

    ``part1`` is the (m, N) label discrepancy; the result is (N, d).
    """
    x = _tensor(x)
    m = x.shape[0]
    n, d = prototypes.shape
    pulled = nd.matmul(nd.transpose(part1), x)
    weight = nd.reshape(nd.reduce_sum(part1, axis=0), (n, 1))
    anchored = nd.mul(nd.broadcast_to(weight, (n, d)), prototypes)
    return nd.scale(nd.sub(pulled, anchored), 1.0 / m)


def analytic_flow(state, x: ArrayLike, y, config: ClassifierConfig = ClassifierConfig(),
                  mode: str = PAPER, classifier: str = EUCLIDEAN) -> Tensor:
    """Negative loss gradient ``dp/dt`` from labelled samples, in closed form.

    ``classifier="euclidean"`` uses sphere-normalised features ``z_ik`` in
    both the probabilities and the difference term; ``"cosine"`` uses the
    cosine-classifier probabilities with raw features. ``mode="exact"``
    multiplies by ``2 * gamma``, turning the unscaled flow into the exact
    negative gradient of :func:`euclidean_cross_entropy`.
    """
    if mode not in (PAPER, EXACT):
        raise ConfigError(f"mode must be {PAPER!r} or {EXACT!r}")
    if classifier not in (EUCLIDEAN, COSINE):
        raise ConfigError(f"classifier must be {EUCLIDEAN!r} or {COSINE!r}")
    p = _prototypes(state)
    xt = _tensor(x)
    if xt.ndim == 1:
        xt = nd.reshape(xt, (1, -1))
    if xt.shape[0] == 0:
        raise ShapeError("analytic_flow: empty batch")
    n, d = p.shape
    m = xt.shape[0]
    onehot = _as_onehot(y, n)
    _check_labeled(onehot)

    if classifier == COSINE:
        probs = nd.softmax(cosine_logits(p, xt, config), axis=-1)
        flow = discrepancy_flow(xt, p, nd.sub(Tensor(onehot), probs))
    else:
        # |z_ik - p_k|^2 = 2 r_k^2 (1 - cos_ik) with r_k = |p_k|
        cos = nd.cosine_matrix(xt, p)
        r = nd.norm(p, axis=1, keepdims=True)
        r_row = nd.broadcast_to(nd.reshape(r, (1, n)), (m, n))
        sqdist = nd.scale(nd.mul(nd.square(r_row), nd.sub(1.0, cos)), 2.0)
        probs = nd.softmax(nd.scale(sqdist, -config.gamma), axis=-1)
        part1 = nd.sub(Tensor(onehot), probs)
        unit = nd.normalize_rows(xt)
        pulled = nd.mul(nd.broadcast_to(r, (n, d)), nd.matmul(nd.transpose(part1), unit))
        weight = nd.reshape(nd.reduce_sum(part1, axis=0), (n, 1))
        anchored = nd.mul(nd.broadcast_to(weight, (n, d)), p)
        flow = nd.scale(nd.sub(pulled, anchored), 1.0 / m)
    if mode == EXACT:
        flow = nd.scale(flow, 2.0 * config.gamma)
    return flow


def mean_gradient(state, support_x: ArrayLike, support_y, config: ClassifierConfig = ClassifierConfig(),
                  mode: str = PAPER, classifier: str = EUCLIDEAN) -> Tensor:
    """Average of per-sample flows over the support set alone.

    This is the few-sample estimator whose bias the learned flows address.
    """
    p = _prototypes(state)
    x = np.atleast_2d(support_x.data if isinstance(support_x, Tensor) else np.asarray(support_x))
    onehot = _as_onehot(support_y, p.shape[0])
    if len(x) == 0:
        raise ShapeError("mean_gradient: empty support set")
    total = None
    for xi, yi in zip(x, onehot):
        g = analytic_flow(p, xi[None, :], yi[None, :], config, mode, classifier)
        total = g if total is None else nd.add(total, g)
    return nd.scale(total, 1.0 / len(x))
