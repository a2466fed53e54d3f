"""Learned prototype gradient flows ``dp/dt = g(p(t), S, Q', t)``.

Every flow is called as ``flow(p, t, inputs)`` with ``p`` an (N, d) tensor
and returns an (N, d) tensor. ``inputs`` is a :class:`FlowInput`; in
inductive mode its unlabeled block is empty, so the flows never see
query features.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ndcore as nd
from .episodes import Episode
from .exceptions import ConfigError, NonFiniteError, ShapeError
from .ndcore import MLP, Linear, Module, Tensor
from .protoclass import COSINE, PAPER, ClassifierConfig, analytic_flow, cosine_logits, discrepancy_flow

GRADNET = "gradnet"
E2GRADNET = "e2gradnet"
MEANGRAD = "meangrad"
ZERO = "zero"
FLOW_KINDS = (GRADNET, E2GRADNET, MEANGRAD, ZERO)


@dataclass
class FlowInput:
    """Samples visible to a flow: labelled support plus unlabeled queries."""

    support_x: np.ndarray
    support_onehot: np.ndarray
    unlabeled_x: np.ndarray

    def __post_init__(self):
        self.support_x = np.atleast_2d(np.asarray(self.support_x, dtype=np.float64))
        self.support_onehot = np.atleast_2d(np.asarray(self.support_onehot, dtype=np.float64))
        d = self.support_x.shape[1]
        self.unlabeled_x = np.asarray(self.unlabeled_x, dtype=np.float64).reshape(-1, d)
        if len(self.support_x) != len(self.support_onehot):
            raise ShapeError("support features and labels differ in length")

    @classmethod
    def from_episode(cls, episode: Episode) -> "FlowInput":
        return cls(episode.support_x, episode.support_onehot(), episode.unlabeled)

    @property
    def n_way(self) -> int:
        return self.support_onehot.shape[1]

    @property
    def dim(self) -> int:
        return self.support_x.shape[1]

    @property
    def visible_x(self) -> np.ndarray:
        return np.concatenate([self.support_x, self.unlabeled_x])

    @property
    def visible_labels(self) -> np.ndarray:
        """One-hot rows for support, ``1/N`` pseudo-labels for unlabeled samples."""
        pseudo = np.full((len(self.unlabeled_x), self.n_way), 1.0 / self.n_way)
        return np.concatenate([self.support_onehot, pseudo])


class Flow(Module):
    kind = "abstract"

    def __call__(self, p: Tensor, t: float, inputs: FlowInput) -> Tensor:
        raise NotImplementedError

    def hparams(self) -> dict:
        return {}


class ZeroFlow(Flow):
    """``dp/dt = 0``; integrating it leaves the mean prototypes untouched."""

    kind = ZERO

    def __call__(self, p, t, inputs):
        return Tensor(np.zeros(p.shape))


class MeanGradFlow(Flow):
    """Negative gradient of the support-set loss, averaged over support samples."""

    kind = MEANGRAD

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        self.config = config

    def __call__(self, p, t, inputs):
        return analytic_flow(p, inputs.support_x, inputs.support_onehot, self.config,
                             mode=PAPER, classifier=COSINE)

    def hparams(self):
        return {"gamma": self.config.gamma}


class _InferenceModule(Module):
    """Gradient estimator plus attention-based weight generator for one ensemble member."""

    def __init__(self, dim: int, scale_hidden: int, embed_width: int, heads: int, head_dim: int,
                 name: str, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = head_dim
        self.scale = MLP(2 * dim, scale_hidden, dim, f"{name}.scale", rng)
        # prototype | feature | prototype*feature | label overlap <k', y'_i>
        self.embed = Linear(3 * dim + 1, embed_width, f"{name}.embed", rng)
        width = heads * head_dim
        self.query = Linear(embed_width, width, f"{name}.attn.q", rng)
        self.key = Linear(embed_width, width, f"{name}.attn.k", rng)
        self.value = Linear(embed_width, width, f"{name}.attn.v", rng)
        self.out = Linear(width, 1, f"{name}.out", rng)

    def _split_heads(self, x: Tensor, n: int, s: int) -> Tensor:
        x = nd.reshape(x, (n, s, self.heads, self.head_dim))
        x = nd.transpose(x, (0, 2, 1, 3))
        return nd.reshape(x, (n * self.heads, s, self.head_dim))

    def attention(self, h: Tensor) -> Tensor:
        """Multi-head self-attention over the sample axis, separately per class."""
        n, s, _ = h.shape
        q = self._split_heads(self.query(h), n, s)
        k = self._split_heads(self.key(h), n, s)
        v = self._split_heads(self.value(h), n, s)
        scores = nd.scale(nd.matmul(q, nd.swapaxes(k, -1, -2)), 1.0 / np.sqrt(self.head_dim))
        mixed = nd.matmul(nd.softmax(scores, axis=-1), v)
        mixed = nd.transpose(nd.reshape(mixed, (n, self.heads, s, self.head_dim)), (0, 2, 1, 3))
        return nd.reshape(mixed, (n, s, self.heads * self.head_dim))

    def __call__(self, pb: Tensor, xb: Tensor, overlap: Tensor):
        """Return (mu, var, weights, diffs) for broadcast prototypes/features (N, S, d)."""
        n, s, d = xb.shape
        scale = self.scale(nd.concat([xb, pb], axis=-1))
        diffs = nd.sub(nd.mul(scale, xb), pb)

        h = nd.elu(self.embed(nd.concat([pb, xb, nd.mul(pb, xb), overlap], axis=-1)))
        logits = nd.reshape(self.out(self.attention(h)), (n, s))
        weights = nd.softmax(logits, axis=1)

        w_row = nd.reshape(weights, (n, 1, s))
        mu = nd.matmul(w_row, diffs)
        centered = nd.sub(diffs, nd.broadcast_to(mu, (n, s, d)))
        var = nd.reshape(nd.matmul(w_row, nd.square(centered)), (n, d))
        return nd.reshape(mu, (n, d)), var, weights, diffs


class GradNet(Flow):
    """Multi-module attention flow combined by inverse-variance weighting.

    Each module estimates per-sample gradients ``d_{k,i} = s(x_i||p_k) * x_i - p_k``,
    weights them with attention over the visible samples, and reports the
    weighted mean and variance. Modules are merged coordinate-wise with
    weights ``1/var`` and the result is damped by ``beta0 * xi**(t/T)``.
    """

    kind = GRADNET

    def __init__(self, n_way: int, dim: int, n_modules: int = 4, scale_hidden: int = 512,
                 embed_width: int = 512, heads: int = 8, head_dim: int = 16, beta0: float = 0.1,
                 xi: float = 0.1, integral_time: float = 40.0, var_floor: float = 1e-8, seed: int = 0):
        if n_modules < 1:
            raise ConfigError("n_modules must be at least 1")
        if beta0 <= 0 or xi <= 0:
            raise ConfigError("beta0 and xi must be positive")
        if integral_time <= 0:
            raise ConfigError("integral_time must be positive")
        self.n_way = n_way
        self.dim = dim
        self.beta0 = beta0
        self.xi = xi
        self.integral_time = integral_time
        self.var_floor = var_floor
        self._hp = dict(n_modules=n_modules, scale_hidden=scale_hidden, embed_width=embed_width,
                        heads=heads, head_dim=head_dim, beta0=beta0, xi=xi,
                        integral_time=integral_time, var_floor=var_floor)
        rng = np.random.default_rng(seed)
        self.modules = [_InferenceModule(dim, scale_hidden, embed_width, heads, head_dim, f"gradnet.m{l}", rng)
                        for l in range(n_modules)]
        self.last_weights: Optional[list[np.ndarray]] = None

    def hparams(self):
        return dict(self._hp)

    def beta(self, t: float) -> float:
        return self.beta0 * self.xi ** (t / self.integral_time)

    def __call__(self, p, t, inputs):
        n, d = p.shape
        if n != self.n_way or d != self.dim:
            raise ShapeError(f"GradNet built for {self.n_way}x{self.dim} prototypes, got {p.shape}")
        x = inputs.visible_x
        s = len(x)
        if s == 0:
            raise ShapeError("GradNet needs at least one visible sample")
        xb = Tensor(np.broadcast_to(x, (n, s, d)))
        pb = nd.broadcast_to(nd.reshape(p, (n, 1, d)), (n, s, d))
        overlap = Tensor((inputs.visible_labels.T)[:, :, None])  # <k', y'_i>, shape (N, S, 1)

        mus, variances, weights = [], [], []
        for l, module in enumerate(self.modules):
            mu, var, w, diffs = module(pb, xb, overlap)
            for label, arr in (("gradient estimate", diffs.data), ("weight", w.data)):
                if not np.all(np.isfinite(arr)):
                    k, i = np.argwhere(~np.isfinite(arr))[0][:2]
                    raise NonFiniteError(f"GradNet module {l}: non-finite {label} at class {k}, sample {i}")
            mus.append(mu)
            variances.append(var)
            weights.append(w.data)
        self.last_weights = weights

        if len(mus) == 1:
            combined = mus[0]
        else:
            inv = [nd.div(1.0, nd.clamp_min(v, self.var_floor)) for v in variances]
            num = inv[0] * mus[0]
            den = inv[0]
            for il, ml in zip(inv[1:], mus[1:]):
                num = num + il * ml
                den = den + il
            combined = nd.div(num, den)
        out = nd.scale(combined, self.beta(t))
        if not np.all(np.isfinite(out.data)):
            k = int(np.argwhere(~np.isfinite(out.data))[0][0])
            raise NonFiniteError(f"GradNet ensemble produced a non-finite flow for class {k}")
        return out


class E2GradNet(Flow):
    """Closed-form difference term times a learned label-discrepancy estimate.

    For each visible sample the cosine-classifier probabilities ``P_i`` are
    mapped to label estimates ``y_hat_i = mlp(P_i)``; the flow is
    ``(1/|S u Q'|) sum_i (y_hat_ik - P_ik) (x_i - p_k)``.
    """

    kind = E2GRADNET

    def __init__(self, n_way: int, config: ClassifierConfig = ClassifierConfig(), seed: int = 0,
                 init_noise: float = 0.0):
        self.n_way = n_way
        self.config = config
        self.init_noise = init_noise
        rng = np.random.default_rng(seed)
        self.residual = MLP(n_way, n_way, n_way, "e2gradnet.residual", rng)
        # identity start: probabilities are positive, so ELU passes them unchanged and y_hat == P
        eye = np.eye(n_way)
        self.residual.hidden.weight.data = eye + init_noise * rng.standard_normal((n_way, n_way))
        self.residual.output.weight.data = eye + init_noise * rng.standard_normal((n_way, n_way))

    def hparams(self):
        return {"gamma": self.config.gamma, "init_noise": self.init_noise}

    def estimate_labels(self, probs: Tensor) -> Tensor:
        return self.residual(probs)

    def __call__(self, p, t, inputs):
        n = p.shape[0]
        if n != self.n_way or inputs.n_way != self.n_way:
            raise ConfigError(f"E2GradNet residual width {self.n_way} does not match n_way {n}")
        x = Tensor(inputs.visible_x)
        if x.shape[0] == 0:
            raise ShapeError("E2GradNet needs at least one visible sample")
        probs = nd.softmax(cosine_logits(p, x, self.config), axis=-1)
        part1 = nd.sub(self.estimate_labels(probs), probs)
        return discrepancy_flow(x, p, part1)


def make_flow(kind: str, n_way: int, dim: int, config: ClassifierConfig = ClassifierConfig(),
              seed: int = 0, **hparams) -> Flow:
    if kind == E2GRADNET:
        return E2GradNet(n_way, config, seed=seed, init_noise=hparams.get("init_noise", 0.0))
    if kind == GRADNET:
        allowed = {"n_modules", "scale_hidden", "embed_width", "heads", "head_dim", "beta0", "xi",
                   "integral_time", "var_floor"}
        unknown = set(hparams) - allowed
        if unknown:
            raise ConfigError(f"unknown GradNet options: {sorted(unknown)}")
        return GradNet(n_way, dim, seed=seed, **hparams)
    if kind == MEANGRAD:
        return MeanGradFlow(config)
    if kind == ZERO:
        return ZeroFlow()
    raise ConfigError(f"unknown flow kind {kind!r}; expected one of {FLOW_KINDS}")


def flow_complexity_probe(flow_kind: str, n_way: int, k_shot: int, queries_per_class: int, dim: int,
                          repeats: int = 5, seed: int = 0, **hparams) -> dict:
    """Median wall time of one flow evaluation on a random transductive episode."""
    if repeats < 3:
        raise ConfigError("repeats must be at least 3")
    rng = np.random.default_rng(seed)
    flow = make_flow(flow_kind, n_way, dim, seed=seed, **hparams)
    support = rng.standard_normal((n_way * k_shot, dim))
    labels = np.eye(n_way)[np.repeat(np.arange(n_way), k_shot)]
    unlabeled = rng.standard_normal((n_way * queries_per_class, dim))
    inputs = FlowInput(support, labels, unlabeled)
    p = Tensor(rng.standard_normal((n_way, dim)))
    times = []
    with nd.no_grad():
        flow(p, 0.0, inputs)  # warm-up
        for _ in range(repeats):
            start = time.perf_counter()
            flow(p, 0.0, inputs)
            times.append(time.perf_counter() - start)
    return {
        "flow": flow_kind, "n_way": n_way, "k_shot": k_shot, "queries_per_class": queries_per_class,
        "dim": dim, "samples": n_way * (k_shot + queries_per_class), "repeats": repeats,
        "median_s": float(np.median(times)), "min_s": float(np.min(times)), "times_s": times,
    }

