"""Episodic meta-training, evaluation, and prototype/gradient diagnostics."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ndcore as nd
from .episodes import (
    MODES,
    TRANSDUCTIVE,
    EmbeddingDataset,
    Episode,
    EpisodeConfig,
    check_disjoint,
    episode_rng,
    sample_episode,
)
from .exceptions import (
    ArtifactMismatch,
    ConfigError,
    IntegrationError,
    NonFiniteError,
    TrainingDiverged,
)
from .gradflow import E2GRADNET, ZERO, Flow, FlowInput, make_flow
from .ndcore import Parameter, Tensor
from .protoclass import (
    COSINE,
    PAPER,
    ClassifierConfig,
    PrototypeState,
    analytic_flow,
    cross_entropy,
    init_prototypes,
    mean_gradient,
    predict,
)
from .solvers import E2, E2Correction, SolverConfig, integrate

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
VAL_STREAM = 1
TEST_STREAM = 2


# -- model bundle ------------------------------------------------------------

@dataclass
class MetaOptimizer:
    """A flow network, an integrator, and the classifier they feed.

    ``refine`` turns an episode's mean prototypes into polished prototypes
    at ``t = T``; ``parameters`` lists everything meta-training updates.
    """

    flow: Flow
    solver: SolverConfig
    classifier: ClassifierConfig
    n_way: int
    dim: int
    mode: str = TRANSDUCTIVE
    correction: Optional[E2Correction] = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.solver.kind == E2 and self.correction is None:
            self.correction = E2Correction(self.dim, seed=self.seed)

    @property
    def flow_kind(self) -> str:
        return self.flow.kind

    def parameters(self) -> list[Parameter]:
        return self.flow.parameters() + self.solver_parameters()

    def solver_parameters(self) -> list[Parameter]:
        if self.correction is not None and self.solver.kind == E2:
            return self.correction.parameters()
        return []

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        self.flow.load_state_dict(state)
        if self.correction is not None and self.solver.kind == E2:
            self.correction.load_state_dict(state)

    def check_episode(self, episode: Episode) -> None:
        if episode.dim != self.dim:
            raise ArtifactMismatch(f"model expects dim {self.dim}, episode has {episode.dim}")
        if episode.n_way != self.n_way:
            raise ArtifactMismatch(f"model expects {self.n_way}-way episodes, got {episode.n_way}")

    def flow_input(self, episode: Episode) -> FlowInput:
        return FlowInput.from_episode(episode.with_mode(self.mode))

    def refine(self, episode: Episode, trajectory: Optional[list] = None) -> tuple[PrototypeState, PrototypeState]:
        """Return ``(p(0), p(T))`` for the episode."""
        self.check_episode(episode)
        start = init_prototypes(episode)
        inputs = self.flow_input(episode)
        final = integrate(lambda p, t: self.flow(p, t, inputs), start, self.solver, self.correction,
                          trajectory=trajectory)
        return start, final

    def clone(self) -> "MetaOptimizer":
        return copy.deepcopy(self)

    def metadata(self) -> dict:
        return {
            "flow": self.flow_kind,
            "flow_hparams": self.flow.hparams(),
            "solver": self.solver.kind,
            "integral_time": self.solver.integral_time,
            "steps": self.solver.steps,
            "gamma": self.classifier.gamma,
            "n_way": self.n_way,
            "dim": self.dim,
            "mode": self.mode,
            "correction_hidden": self.correction.hidden_width if self.correction is not None else None,
            "seed": self.seed,
        }


def build_model(flow_kind: str, n_way: int, dim: int, solver: SolverConfig = SolverConfig(),
                classifier: ClassifierConfig = ClassifierConfig(), mode: str = TRANSDUCTIVE,
                seed: int = 0, correction_hidden: Optional[int] = None, **flow_hparams) -> MetaOptimizer:
    if flow_kind == "gradnet":
        flow_hparams.setdefault("integral_time", solver.integral_time)
    flow = make_flow(flow_kind, n_way, dim, classifier, seed=seed, **flow_hparams)
    correction = E2Correction(dim, correction_hidden, seed=seed + 1) if solver.kind == E2 else None
    return MetaOptimizer(flow, solver, classifier, n_way, dim, mode, correction, seed)


def episode_loss(model: MetaOptimizer, episode: Episode) -> Tensor:
    """Query negative log-likelihood under the prototypes reached at ``t = T``."""
    _, final = model.refine(episode)
    return cross_entropy(final, episode.query_x, episode.query_y, model.classifier)


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> list[np.ndarray]:
    """One bias-corrected Adam step; weight decay is decoupled and applied first."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ConfigError(f"shape mismatch for parameter {i}")
        if weight_decay:
            p = p - lr * weight_decay * p
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


class Adam:
    """Adam over :class:`Parameter` objects, reading their accumulated ``.grad``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        if not self.params:
            return
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                        self.lr if lr is None else lr, self.weight_decay)
        for p, value in zip(self.params, new):
            p.data = value


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    mean_accuracy: float
    ci95: float
    accuracies: list = field(repr=False)
    episodes: int = 0
    label: str = ""

    def as_row(self) -> dict:
        return {"label": self.label, "episodes": self.episodes,
                "mean_accuracy": self.mean_accuracy, "ci95": self.ci95}

    def overlaps(self, other: "EvalReport") -> bool:
        lo, hi = self.mean_accuracy - self.ci95, self.mean_accuracy + self.ci95
        olo, ohi = other.mean_accuracy - other.ci95, other.mean_accuracy + other.ci95
        return not (hi < olo or ohi < lo)


def ci95(values: Sequence[float]) -> float:
    """``1.96 * sample std / sqrt(n)``; zero for fewer than two values."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("PROTOFLOW_THREADS", "1") or 1)
    return max(1, threads)


def _map_episodes(fn: Callable[[MetaOptimizer, int], object], model: MetaOptimizer, count: int,
                  threads: Optional[int]) -> list:
    """Apply ``fn(model, i)`` for every episode index, without recording a graph.

    With several workers each thread gets its own copy of the model.
    """
    workers = _threads(threads)
    if workers == 1:
        with nd.no_grad():
            return [fn(model, i) for i in range(count)]
    local = threading.local()

    def run(i):
        if not hasattr(local, "model"):
            local.model = model.clone()
        with nd.no_grad():
            return fn(local.model, i)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(count)))


def episode_accuracy(model: MetaOptimizer, episode: Episode) -> float:
    _, final = model.refine(episode)
    return float(np.mean(predict(final, episode.query_x, model.classifier) == episode.query_y))


def evaluate(dataset: EmbeddingDataset, model: MetaOptimizer, n_episodes: int = 600,
             episode_config: Optional[EpisodeConfig] = None, seed: int = 0, stream: int = TEST_STREAM,
             threads: Optional[int] = None, label: str = "") -> EvalReport:
    """Mean query accuracy over ``n_episodes`` episodes with a 95% interval.

    Episode ``i`` is fully determined by ``(seed, stream, i)``, so two models
    evaluated with the same arguments see identical episodes.
    """
    if dataset.dim != model.dim:
        raise ArtifactMismatch(f"model expects dim {model.dim}, dataset has {dataset.dim}")
    cfg = episode_config or EpisodeConfig(n_way=model.n_way, mode=model.mode)
    if cfg.n_way != model.n_way:
        raise ArtifactMismatch(f"model expects {model.n_way}-way episodes, config asks {cfg.n_way}")
    accs = _map_episodes(
        lambda m, i: episode_accuracy(m, sample_episode(dataset, cfg, episode_rng(seed, i, stream))),
        model, n_episodes, threads)
    return EvalReport(float(np.mean(accs)), ci95(accs), accs, n_episodes, label or model.flow_kind)


def baseline_model(model: MetaOptimizer) -> MetaOptimizer:
    """Same classifier and shape, zero flow, plain Euler: the mean-prototype baseline."""
    return build_model(ZERO, model.n_way, model.dim, SolverConfig("euler", model.solver.integral_time, 1),
                       model.classifier, model.mode)


def baseline_accuracy(dataset: EmbeddingDataset, episode_config: EpisodeConfig, n_episodes: int,
                      classifier: ClassifierConfig = ClassifierConfig(), seed: int = 0,
                      stream: int = TEST_STREAM) -> EvalReport:
    """Nearest-mean-prototype accuracy computed directly, without any solver."""
    accs = []
    for i in range(n_episodes):
        ep = sample_episode(dataset, episode_config, episode_rng(seed, i, stream))
        state = init_prototypes(ep)
        accs.append(float(np.mean(predict(state, ep.query_x, classifier) == ep.query_y)))
    return EvalReport(float(np.mean(accs)), ci95(accs), accs, n_episodes, "baseline")


# -- diagnostics -------------------------------------------------------------

def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def prototype_bias(dataset: EmbeddingDataset, model: MetaOptimizer, n_episodes: int = 1000,
                   episode_config: Optional[EpisodeConfig] = None, seed: int = 0,
                   stream: int = TEST_STREAM, threads: Optional[int] = None) -> tuple[float, float]:
    """Mean cosine of ``p(0)`` and ``p(T)`` to the all-sample class means."""
    cfg = episode_config or EpisodeConfig(n_way=model.n_way, k_shot=1, mode=model.mode)
    real = dataset.class_means()

    def one(m, i):
        ep = sample_episode(dataset, cfg, episode_rng(seed, i, stream))
        start, final = m.refine(ep)
        init = [_cos(start.prototypes.data[k], real[c]) for k, c in enumerate(ep.class_ids)]
        fin = [_cos(final.prototypes.data[k], real[c]) for k, c in enumerate(ep.class_ids)]
        return np.mean(init), np.mean(fin)

    pairs = np.array(_map_episodes(one, model, n_episodes, threads))
    return float(pairs[:, 0].mean()), float(pairs[:, 1].mean())


def gradient_similarities(model: MetaOptimizer, episode: Episode, population_x: np.ndarray,
                          population_y: np.ndarray) -> tuple[float, float]:
    """Cosine of the support-mean gradient and of the learned flow at ``t = 0``
    to the gradient computed from the full class populations."""
    state = init_prototypes(episode)
    real = analytic_flow(state, population_x, population_y, model.classifier, PAPER, COSINE).data
    averaged = mean_gradient(state, episode.support_x, episode.support_y, model.classifier, PAPER, COSINE).data
    inferred = model.flow(state.prototypes, 0.0, model.flow_input(episode)).data
    return _cos(averaged, real), _cos(inferred, real)


def gradient_bias(dataset: EmbeddingDataset, model: MetaOptimizer, n_episodes: int = 1000,
                  episode_config: Optional[EpisodeConfig] = None, seed: int = 0,
                  stream: int = TEST_STREAM, threads: Optional[int] = None) -> tuple[float, float]:
    """Mean ``(sim_mean_grad, sim_inferred_grad)`` against the full-population gradient."""
    cfg = episode_config or EpisodeConfig(n_way=model.n_way, k_shot=1, mode=model.mode)

    def one(m, i):
        ep = sample_episode(dataset, cfg, episode_rng(seed, i, stream))
        xs = [dataset.classes[c] for c in ep.class_ids]
        pop_x = np.concatenate(xs)
        pop_y = np.concatenate([np.full(len(x), k) for k, x in enumerate(xs)])
        return gradient_similarities(m, ep, pop_x, pop_y)

    pairs = np.array(_map_episodes(one, model, n_episodes, threads))
    return float(pairs[:, 0].mean()), float(pairs[:, 1].mean())


# -- training ----------------------------------------------------------------

@dataclass
class MetaConfig:
    lr: float = 1e-4
    solver_lr: Optional[float] = None
    weight_decay: float = 5e-4
    epochs: int = 50
    episodes_per_epoch: int = 100
    lr_decay_epochs: tuple = (15, 30, 40)
    lr_decay_factor: float = 0.1
    batch_episodes: int = 8
    val_episodes: int = 200
    seed: int = 0
    mode: str = TRANSDUCTIVE

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.solver_lr is not None and not self.solver_lr > 0:
            raise ConfigError("solver_lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.batch_episodes < 1:
            raise ConfigError("epochs must be >= 0; episodes_per_epoch and batch_episodes >= 1")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if any(e <= 0 for e in self.lr_decay_epochs):
            raise ConfigError("lr_decay_epochs must be positive")
        if self.val_episodes < 1:
            raise ConfigError("val_episodes must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    def decay_at(self, epoch: int) -> float:
        """Schedule multiplier for 0-based ``epoch``; milestones at or beyond ``epochs`` never fire."""
        return self.lr_decay_factor ** sum(1 for e in self.lr_decay_epochs if e <= epoch)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_at(epoch)

    def solver_lr_at(self, epoch: int) -> float:
        return (self.lr if self.solver_lr is None else self.solver_lr) * self.decay_at(epoch)


@dataclass
class TrainResult:
    model: MetaOptimizer
    history: list
    best_epoch: int
    best_val_accuracy: float
    episode_losses: list = field(repr=False, default_factory=list)


def meta_train(train: EmbeddingDataset, val: EmbeddingDataset, config: MetaConfig,
               model: Optional[MetaOptimizer] = None, flow_kind: str = E2GRADNET,
               solver: Optional[SolverConfig] = None, episode_config: Optional[EpisodeConfig] = None,
               classifier: ClassifierConfig = ClassifierConfig(),
               on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Minimise query NLL over sampled episodes; keep the best-validation model.

    The initial model is scored too, so with ``epochs=0`` (or if training
    never helps) the initial parameters are returned. Single-threaded and
    fully determined by ``config.seed``.
    """
    check_disjoint(train, val)
    if train.dim != val.dim:
        raise ConfigError("train and val datasets differ in dim")
    ep_cfg = episode_config or EpisodeConfig(mode=config.mode, seed=config.seed)
    if ep_cfg.mode != config.mode:
        ep_cfg = EpisodeConfig(ep_cfg.n_way, ep_cfg.k_shot, ep_cfg.queries_per_class,
                               ep_cfg.episodes_per_epoch, ep_cfg.seed, config.mode)
    if model is None:
        model = build_model(flow_kind, ep_cfg.n_way, train.dim, solver or SolverConfig(),
                            classifier, config.mode, seed=config.seed)
    if model.mode != config.mode:
        raise ConfigError(f"model mode {model.mode!r} differs from training mode {config.mode!r}")

    params = model.parameters()
    flow_opt = Adam(model.flow.parameters(), config.lr, config.weight_decay)
    solver_opt = Adam(model.solver_parameters(), config.solver_lr_at(0), config.weight_decay)

    def validate() -> float:
        return evaluate(val, model, config.val_episodes, ep_cfg, seed=config.seed, stream=VAL_STREAM,
                        threads=1).mean_accuracy

    best_acc = validate()
    best_state = model.state_dict()
    best_epoch = -1
    history: list[dict] = []
    all_losses: list[float] = []
    last_good = model.clone()

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses: list[float] = []
        for start in range(0, config.episodes_per_epoch, config.batch_episodes):
            batch = range(start, min(start + config.batch_episodes, config.episodes_per_epoch))
            model.zero_grad()
            for i in batch:
                index = epoch * config.episodes_per_epoch + i
                episode = sample_episode(train, ep_cfg, episode_rng(config.seed, index, TRAIN_STREAM))
                try:
                    loss = episode_loss(model, episode)
                except (IntegrationError, NonFiniteError) as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, epoch) from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite loss", last_good, epoch)
                nd.backward(nd.scale(loss, 1.0 / len(batch)), params)
                losses.append(value)
            if params:
                if not all(np.all(np.isfinite(p.grad)) for p in params):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite gradient", last_good, epoch)
                flow_opt.step(lr)
                solver_opt.step(config.solver_lr_at(epoch))
                last_good = model.clone()
        val_acc = validate()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_acc": val_acc, "lr": lr}
        history.append(row)
        all_losses.extend(losses)
        log.info("epoch %d loss %.4f val %.4f lr %.2e", epoch, row["train_loss"], val_acc, lr)
        if on_epoch is not None:
            on_epoch(row)
        if val_acc > best_acc:
            best_acc, best_state, best_epoch = val_acc, model.state_dict(), epoch

    best = model.clone()
    best.load_state_dict(best_state)
    return TrainResult(best, history, best_epoch, best_acc, all_losses)


def write_metrics_jsonl(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
