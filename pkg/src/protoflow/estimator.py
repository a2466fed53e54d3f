"""scikit-learn style front end.

``fit`` meta-trains on labelled base-class embeddings. ``predict`` then
classifies queries of a *new* task, so it needs that task's support set::

    clf = PrototypeFlowClassifier(epochs=10).fit(X_base, y_base)
    y_hat = clf.predict(X_query, support_X=X_s, support_y=y_s)
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import ndcore as nd
from .episodes import EmbeddingDataset, EpisodeConfig, episode_from_arrays
from .exceptions import ConfigError, SamplingError
from .metatrain import MetaConfig, build_model, meta_train
from .protoclass import ClassifierConfig, classify
from .solvers import SolverConfig


class PrototypeFlowClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier that polishes mean prototypes with a learned flow.

    Parameters mirror the run configuration: ``flow`` and ``solver`` pick
    the meta-optimizer, the episode shape fixes ``n_way``, and the training
    fields are handed to :func:`protoflow.metatrain.meta_train`. A fraction
    ``val_fraction`` of base classes is held out for best-epoch selection.
    """

    def __init__(self, flow: str = "e2gradnet", solver: str = "e2", n_way: int = 5, k_shot: int = 1,
                 queries_per_class: int = 15, integral_time: float = 10.0, steps: int = 10,
                 gamma: float = 10.0, mode: str = "transductive", lr: float = 1e-2,
                 solver_lr: Optional[float] = 1e-4, weight_decay: float = 5e-4, epochs: int = 10,
                 episodes_per_epoch: int = 100, batch_episodes: int = 8, val_fraction: float = 0.2,
                 val_episodes: int = 200, random_state: int = 0):
        self.flow = flow
        self.solver = solver
        self.n_way = n_way
        self.k_shot = k_shot
        self.queries_per_class = queries_per_class
        self.integral_time = integral_time
        self.steps = steps
        self.gamma = gamma
        self.mode = mode
        self.lr = lr
        self.solver_lr = solver_lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.batch_episodes = batch_episodes
        self.val_fraction = val_fraction
        self.val_episodes = val_episodes
        self.random_state = random_state

    def _split(self, X, y):
        ids = np.unique(y)
        n_val = max(self.n_way, int(round(self.val_fraction * len(ids))))
        if len(ids) - n_val < self.n_way:
            raise ConfigError(f"need at least {2 * self.n_way} base classes for train/val episodes, got {len(ids)}")
        order = np.random.default_rng(self.random_state).permutation(ids)
        val_ids = set(order[:n_val].tolist())
        mask = np.array([c in val_ids for c in y])
        return (EmbeddingDataset(X[~mask], y[~mask], split="train"),
                EmbeddingDataset(X[mask], y[mask], split="val"))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("base-class labels must be integers")
        if np.any(y < 0):
            raise ValueError("base-class labels must be non-negative")
        self.n_features_in_ = X.shape[1]
        train, val = self._split(X, y)
        episodes = EpisodeConfig(self.n_way, self.k_shot, self.queries_per_class, self.episodes_per_epoch,
                                 self.random_state, self.mode)
        model = build_model(self.flow, self.n_way, X.shape[1],
                            SolverConfig(self.solver, self.integral_time, self.steps),
                            ClassifierConfig(self.gamma), self.mode, seed=self.random_state)
        config = MetaConfig(lr=self.lr, solver_lr=self.solver_lr, weight_decay=self.weight_decay,
                            epochs=self.epochs, episodes_per_epoch=self.episodes_per_epoch,
                            batch_episodes=self.batch_episodes, val_episodes=self.val_episodes,
                            seed=self.random_state, mode=self.mode)
        result = meta_train(train, val, config, model=model, episode_config=episodes)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _episode(self, X, support_X, support_y):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        support_X, support_y = check_X_y(support_X, support_y, dtype=np.float64)
        for name, arr in (("X", X), ("support_X", support_X)):
            if arr.shape[1] != self.n_features_in_:
                raise ValueError(f"{name} has {arr.shape[1]} features, model was fit on {self.n_features_in_}")
        classes, local = np.unique(support_y, return_inverse=True)
        if len(classes) != self.n_way:
            raise SamplingError(f"support set has {len(classes)} classes, model is {self.n_way}-way")
        return classes, episode_from_arrays(support_X, local, X, self.n_way, self.mode)

    def refine_prototypes(self, X, *, support_X, support_y) -> np.ndarray:
        """Polished prototypes (one row per sorted support label) for the task."""
        _, episode = self._episode(X, support_X, support_y)
        with nd.no_grad():
            _, final = self.model_.refine(episode)
        return final.prototypes.data.copy()

    def predict_proba(self, X, *, support_X, support_y) -> np.ndarray:
        classes, episode = self._episode(X, support_X, support_y)
        with nd.no_grad():
            _, final = self.model_.refine(episode)
            probs = classify(final, episode.query_x, self.model_.classifier).data
        self.classes_ = classes
        return probs

    def predict(self, X, *, support_X, support_y) -> np.ndarray:
        probs = self.predict_proba(X, support_X=support_X, support_y=support_y)
        return self.classes_[np.argmax(probs, axis=1)]

    def score(self, X, y, *, support_X, support_y, sample_weight=None) -> float:
        from sklearn.metrics import accuracy_score

        return accuracy_score(y, self.predict(X, support_X=support_X, support_y=support_y),
                              sample_weight=sample_weight)
