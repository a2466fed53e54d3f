import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from protoflow.episodes import synth_gaussian
from protoflow.estimator import PrototypeFlowClassifier
from protoflow.exceptions import ConfigError, SamplingError

FAST = dict(epochs=1, episodes_per_epoch=8, batch_episodes=4, val_episodes=5, queries_per_class=3,
            integral_time=2.0, steps=2)


@pytest.fixture(scope="module")
def base_and_novel():
    ds = synth_gaussian(30, 8, 12, noise_sigma=0.2, seed=0)
    X, y = ds.features, ds.labels
    base = y < 20
    return X[base], y[base], X[~base], y[~base]


@pytest.fixture(scope="module")
def fitted(base_and_novel):
    X, y, _, _ = base_and_novel
    return PrototypeFlowClassifier(**FAST).fit(X, y)


def support_split(X, y, classes, shots=1):
    s_idx, q_idx = [], []
    for c in classes:
        idx = np.flatnonzero(y == c)
        s_idx.extend(idx[:shots])
        q_idx.extend(idx[shots:])
    return X[s_idx], y[s_idx], X[q_idx], y[q_idx]


def test_params_round_trip():
    clf = PrototypeFlowClassifier(n_way=3, lr=0.5)
    params = clf.get_params()
    assert params["n_way"] == 3 and params["lr"] == 0.5
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    clf.set_params(steps=4)
    assert clf.steps == 4


def test_fit_records_history(fitted):
    assert fitted.n_features_in_ == 8
    assert len(fitted.history_) == 1 and fitted.best_epoch_ in (-1, 0)
    assert fitted.model_.flow_kind == "e2gradnet"


def test_predict_uses_support_labels(fitted, base_and_novel):
    _, _, Xn, yn = base_and_novel
    classes = [29, 21, 25, 23, 27]
    sx, sy, qx, qy = support_split(Xn, yn, classes)
    pred = fitted.predict(qx, support_X=sx, support_y=sy)
    assert set(pred) <= set(classes)
    assert list(fitted.classes_) == sorted(classes)
    proba = fitted.predict_proba(qx, support_X=sx, support_y=sy)
    assert proba.shape == (len(qx), 5)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(pred, np.array(sorted(classes))[proba.argmax(axis=1)])
    assert 0.0 <= fitted.score(qx, qy, support_X=sx, support_y=sy) <= 1.0
    assert fitted.refine_prototypes(qx, support_X=sx, support_y=sy).shape == (5, 8)


def test_separable_task_is_solved(fitted):
    clean = synth_gaussian(5, 8, 6, noise_sigma=0.0, seed=4)
    sx, sy, qx, qy = support_split(clean.features, clean.labels + 100, range(100, 105))
    assert fitted.score(qx, qy, support_X=sx, support_y=sy) == 1.0


def test_input_validation(fitted, base_and_novel):
    _, _, Xn, yn = base_and_novel
    sx, sy, qx, _ = support_split(Xn, yn, [20, 21, 22, 23, 24])
    with pytest.raises(NotFittedError):
        PrototypeFlowClassifier().predict(qx, support_X=sx, support_y=sy)
    with pytest.raises(ValueError):
        fitted.predict(qx[:, :4], support_X=sx, support_y=sy)
    with pytest.raises(SamplingError):
        fitted.predict(qx, support_X=sx[:3], support_y=sy[:3])
    with pytest.raises(ValueError):
        fitted.predict(np.full_like(qx, np.nan), support_X=sx, support_y=sy)


def test_fit_validation(base_and_novel):
    X, y, _, _ = base_and_novel
    with pytest.raises(ConfigError):
        PrototypeFlowClassifier(**FAST).fit(X[y < 8], y[y < 8])
    with pytest.raises(ValueError):
        PrototypeFlowClassifier(**FAST).fit(X, y + 0.5)
    with pytest.raises(ValueError):
        PrototypeFlowClassifier(**FAST).fit(X, y - 3)


def test_fit_is_deterministic(base_and_novel, fitted):
    X, y, _, _ = base_and_novel
    again = PrototypeFlowClassifier(**FAST).fit(X, y)
    a, b = fitted.model_.state_dict(), again.model_.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
