import numpy as np
import pytest

from protoflow import ndcore as nd
from protoflow.episodes import INDUCTIVE, TRANSDUCTIVE, EpisodeConfig, episode_rng, sample_episode, synth_gaussian
from protoflow.exceptions import ConfigError, NonFiniteError, ShapeError
from protoflow.gradflow import (
    E2GRADNET,
    GRADNET,
    E2GradNet,
    FlowInput,
    GradNet,
    MeanGradFlow,
    ZeroFlow,
    flow_complexity_probe,
    make_flow,
)
from protoflow.ndcore import Tensor
from protoflow.protoclass import COSINE, analytic_flow, mean_gradient

SMALL = dict(scale_hidden=6, embed_width=8, heads=2, head_dim=3)


def random_input(rng, n=3, k=2, q=2, d=4):
    support = rng.standard_normal((n * k, d))
    onehot = np.eye(n)[np.repeat(np.arange(n), k)]
    return FlowInput(support, onehot, rng.standard_normal((n * q, d)))


def elu(v):
    return np.where(v > 0, v, np.expm1(np.minimum(v, 0)))


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def module_oracle(mod, p, x, labels):
    """Per-class, per-sample loops over one inference module."""
    n, _ = p.shape
    s = len(x)
    lin = lambda layer, v: v @ layer.weight.data + layer.bias.data
    mus, variances, weights = [], [], []
    for k in range(n):
        diffs, hidden = [], []
        for i in range(s):
            sc = lin(mod.scale.output, elu(lin(mod.scale.hidden, np.concatenate([x[i], p[k]]))))
            diffs.append(sc * x[i] - p[k])
            feat = np.concatenate([p[k], x[i], p[k] * x[i], [labels[i, k]]])
            hidden.append(elu(lin(mod.embed, feat)))
        diffs, hidden = np.array(diffs), np.array(hidden)
        q, kk, v = lin(mod.query, hidden), lin(mod.key, hidden), lin(mod.value, hidden)
        mixed = np.zeros_like(q)
        for h in range(mod.heads):
            cols = slice(h * mod.head_dim, (h + 1) * mod.head_dim)
            for i in range(s):
                att = softmax(np.array([q[i, cols] @ kk[j, cols] for j in range(s)]) / np.sqrt(mod.head_dim))
                mixed[i, cols] = att @ v[:, cols]
        w = softmax(lin(mod.out, mixed)[:, 0])
        mu = w @ diffs
        mus.append(mu)
        variances.append(w @ (diffs - mu) ** 2)
        weights.append(w)
    return np.array(mus), np.array(variances), np.array(weights)


def gradnet_oracle(net, p, t, inputs):
    x, labels = inputs.visible_x, inputs.visible_labels
    results = [module_oracle(m, p, x, labels) for m in net.modules]
    inv = [1.0 / np.maximum(var, net.var_floor) for _, var, _ in results]
    num = sum(i * mu for i, (mu, _, _) in zip(inv, results))
    return net.beta(t) * num / sum(inv)


def e2_oracle(net, p, inputs):
    x = inputs.visible_x
    out = np.zeros_like(p)
    for xi in x:
        cos = np.array([xi @ pk / (np.linalg.norm(xi) * np.linalg.norm(pk)) for pk in p])
        probs = softmax(net.config.gamma * cos)
        layer = net.residual
        y_hat = elu(probs @ layer.hidden.weight.data + layer.hidden.bias.data) @ layer.output.weight.data
        y_hat = y_hat + layer.output.bias.data
        for k in range(len(p)):
            out[k] += (y_hat[k] - probs[k]) * (xi - p[k])
    return out / len(x)


# -- GradNet -------------------------------------------------------------------

def test_gradnet_matches_loop_oracle():
    rng = np.random.default_rng(0)
    inputs = random_input(rng)
    p = rng.standard_normal((3, 4))
    net = GradNet(3, 4, n_modules=3, seed=1, **SMALL)
    got = net(Tensor(p), 5.0, inputs).data
    np.testing.assert_allclose(got, gradnet_oracle(net, p, 5.0, inputs), rtol=1e-10, atol=1e-13)


def test_single_module_is_weighted_mean():
    rng = np.random.default_rng(1)
    inputs = random_input(rng)
    p = rng.standard_normal((3, 4))
    net = GradNet(3, 4, n_modules=1, seed=2, **SMALL)
    mu, _, _ = module_oracle(net.modules[0], p, inputs.visible_x, inputs.visible_labels)
    xb = Tensor(np.broadcast_to(inputs.visible_x, (3, len(inputs.visible_x), 4)))
    pb = nd.broadcast_to(nd.reshape(Tensor(p), (3, 1, 4)), xb.shape)
    overlap = Tensor(inputs.visible_labels.T[:, :, None])
    mu_tape = net.modules[0](pb, xb, overlap)[0].data
    out = net(Tensor(p), 0.0, inputs).data
    assert np.array_equal(out, net.beta(0.0) * mu_tape)
    np.testing.assert_allclose(mu_tape, mu, rtol=1e-10, atol=1e-13)


def test_single_sample_takes_variance_floor():
    rng = np.random.default_rng(2)
    inputs = FlowInput(rng.standard_normal((1, 4)), np.eye(3)[[0]], np.zeros((0, 4)))
    p = rng.standard_normal((3, 4))
    net = GradNet(3, 4, n_modules=2, seed=3, **SMALL)
    out = net(Tensor(p), 0.0, inputs).data
    for w in net.last_weights:
        assert np.array_equal(w, np.ones((3, 1)))
    mus = [module_oracle(m, p, inputs.visible_x, inputs.visible_labels)[0] for m in net.modules]
    # both variances clamp to the floor, so the ensemble is the plain average
    np.testing.assert_allclose(out, net.beta(0.0) * (mus[0] + mus[1]) / 2, rtol=1e-10)
    assert np.all(np.isfinite(out))


def test_beta_decay_over_horizon():
    rng = np.random.default_rng(3)
    inputs = random_input(rng)
    p = Tensor(rng.standard_normal((3, 4)))
    net = GradNet(3, 4, n_modules=2, xi=0.1, integral_time=8.0, seed=0, **SMALL)
    start, end = net(p, 0.0, inputs).data, net(p, 8.0, inputs).data
    np.testing.assert_allclose(end, 0.1 * start, rtol=1e-12)
    assert abs(net.beta(8.0) / net.beta(0.0) - 0.1) < 1e-15


def test_attention_weights_sum_to_one():
    rng = np.random.default_rng(4)
    net = GradNet(3, 4, n_modules=2, seed=0, **SMALL)
    net(Tensor(rng.standard_normal((3, 4))), 0.0, random_input(rng))
    for w in net.last_weights:
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_default_layer_shapes():
    net = GradNet(5, 16, seed=0)
    assert len(net.modules) == 4
    m = net.modules[0]
    assert m.scale.hidden.weight.shape == (32, 512) and m.scale.output.weight.shape == (512, 16)
    assert m.embed.weight.shape == (3 * 16 + 1, 512)
    assert m.query.weight.shape == (512, 128) and m.out.weight.shape == (128, 1)


def test_gradnet_nan_diagnostics():
    rng = np.random.default_rng(5)
    inputs = random_input(rng)
    net = GradNet(3, 4, n_modules=2, seed=0, **SMALL)
    net.modules[1].scale.output.weight.data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="module 1: non-finite gradient estimate at class 0"):
        net(Tensor(rng.standard_normal((3, 4))), 0.0, inputs)


def test_gradnet_shape_errors():
    rng = np.random.default_rng(6)
    net = GradNet(3, 4, n_modules=1, seed=0, **SMALL)
    with pytest.raises(ShapeError):
        net(Tensor(rng.standard_normal((2, 4))), 0.0, random_input(rng, n=2))
    with pytest.raises(ShapeError):
        net(Tensor(rng.standard_normal((3, 4))), 0.0, FlowInput(np.zeros((0, 4)), np.zeros((0, 3)), []))
    with pytest.raises(ConfigError):
        GradNet(3, 4, n_modules=0)


def test_gradnet_gradcheck():
    rng = np.random.default_rng(7)
    inputs = random_input(rng, n=2, k=1, q=1, d=3)
    net = GradNet(2, 3, n_modules=2, seed=0, scale_hidden=4, embed_width=4, heads=2, head_dim=2)
    p = Tensor(rng.standard_normal((2, 3)))
    target = rng.standard_normal((2, 3))
    loss = lambda: nd.reduce_sum(nd.mul(net(p, 1.0, inputs), Tensor(target)))
    # key, value and output biases shift softmax logits uniformly, so their gradient is exactly zero
    invariant = (".attn.k.bias", ".attn.v.bias", ".out.bias")
    params = [q for q in net.parameters() if not q.name.endswith(invariant)]
    assert nd.gradcheck(loss, params, tol=1e-5).passed
    net.zero_grad()
    nd.backward(loss())
    for q in net.parameters():
        if q.name.endswith(invariant):
            assert np.max(np.abs(q.grad)) <= 1e-12


# -- E2GradNet -----------------------------------------------------------------

def test_identity_residual_gives_zero_flow():
    rng = np.random.default_rng(8)
    net = E2GradNet(3)
    assert not np.any(net(Tensor(rng.standard_normal((3, 4))), 0.0, random_input(rng)).data)


def test_e2_matches_loop_oracle():
    rng = np.random.default_rng(9)
    inputs = random_input(rng, n=2, k=1, q=0, d=3)
    p = rng.standard_normal((2, 3))
    net = E2GradNet(2, seed=4, init_noise=0.5)
    np.testing.assert_allclose(net(Tensor(p), 0.0, inputs).data, e2_oracle(net, p, inputs), rtol=1e-12, atol=1e-14)


def test_e2_sample_at_prototype():
    rng = np.random.default_rng(10)
    p = rng.standard_normal((2, 3))
    inputs = FlowInput(p[:1].copy(), np.eye(2)[[0]], np.zeros((0, 3)))
    net = E2GradNet(2, seed=1, init_noise=0.5)
    out = net(Tensor(p), 0.0, inputs).data
    assert not np.any(out[0])
    assert np.any(out[1])


def test_perfect_residual_recovers_population_flow():
    ds = synth_gaussian(5, 6, 10, seed=1)
    ep = sample_episode(ds, EpisodeConfig(5, 1, 1), episode_rng(0, 0))
    x = np.concatenate([ds.classes[c] for c in ep.class_ids])
    onehot = np.eye(5)[np.repeat(np.arange(5), 10)]
    net = E2GradNet(5)
    net.estimate_labels = lambda probs: Tensor(onehot)
    p = Tensor(ep.support_x.copy())
    got = net(p, 0.0, FlowInput(x, onehot, np.zeros((0, 6)))).data
    np.testing.assert_allclose(got, analytic_flow(p, x, onehot, classifier=COSINE).data, atol=1e-12)


def test_e2_width_mismatch():
    rng = np.random.default_rng(11)
    with pytest.raises(ConfigError):
        E2GradNet(3)(Tensor(rng.standard_normal((4, 4))), 0.0, random_input(rng, n=4))


def test_e2_gradcheck():
    rng = np.random.default_rng(12)
    inputs = random_input(rng, n=3, k=1, q=2, d=4)
    net = E2GradNet(3, seed=2, init_noise=0.3)
    p = Tensor(rng.standard_normal((3, 4)))
    target = rng.standard_normal((3, 4))
    loss = lambda: nd.reduce_sum(nd.mul(net(p, 0.0, inputs), Tensor(target)))
    assert nd.gradcheck(loss, net.parameters(), tol=1e-6).passed


# -- shared properties ---------------------------------------------------------

def build(kind):
    if kind == GRADNET:
        return GradNet(3, 4, n_modules=2, seed=5, **SMALL)
    return E2GradNet(3, seed=5, init_noise=0.4)


@pytest.mark.parametrize("kind", [GRADNET, E2GRADNET])
def test_class_permutation_equivariance(kind):
    rng = np.random.default_rng(13)
    inputs = random_input(rng)
    p = rng.standard_normal((3, 4))
    perm = np.array([2, 0, 1])
    net = build(kind)
    if kind == E2GRADNET:
        # the residual mixes classes, so only a permutation-equivariant residual keeps the symmetry
        net = E2GradNet(3)
    base = net(Tensor(p), 0.0, inputs).data
    permuted = FlowInput(inputs.support_x, inputs.support_onehot[:, perm], inputs.unlabeled_x)
    out = net(Tensor(p[perm]), 0.0, permuted).data
    np.testing.assert_allclose(out, base[perm], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("kind", [GRADNET, E2GRADNET])
def test_sample_permutation_invariance(kind):
    rng = np.random.default_rng(14)
    inputs = random_input(rng)
    p = Tensor(rng.standard_normal((3, 4)))
    net = build(kind)
    order = rng.permutation(len(inputs.support_x))
    shuffled = FlowInput(inputs.support_x[order], inputs.support_onehot[order], inputs.unlabeled_x[::-1])
    np.testing.assert_allclose(net(p, 0.0, shuffled).data, net(p, 0.0, inputs).data, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("kind", [GRADNET, E2GRADNET])
def test_inductive_ignores_queries(kind):
    ds = synth_gaussian(6, 4, 10, seed=2)
    ep = sample_episode(ds, EpisodeConfig(3, 2, 3), episode_rng(1, 0))
    net = build(kind)
    p = Tensor(ep.support_x[::2].copy())
    inductive = FlowInput.from_episode(ep.with_mode(INDUCTIVE))
    support_only = FlowInput(ep.support_x, ep.support_onehot(), np.zeros((0, 4)))
    assert np.array_equal(net(p, 0.0, inductive).data, net(p, 0.0, support_only).data)
    transductive = FlowInput.from_episode(ep.with_mode(TRANSDUCTIVE))
    assert len(transductive.visible_x) == 3 * 5


def test_pseudo_labels():
    rng = np.random.default_rng(15)
    labels = random_input(rng, n=4, k=1, q=3).visible_labels
    np.testing.assert_allclose(labels.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(labels[4:], 0.25)


def test_zero_and_mean_flows():
    rng = np.random.default_rng(16)
    inputs = random_input(rng)
    p = Tensor(rng.standard_normal((3, 4)))
    assert not np.any(ZeroFlow()(p, 0.0, inputs).data)
    np.testing.assert_allclose(MeanGradFlow()(p, 0.0, inputs).data,
                               mean_gradient(p, inputs.support_x, inputs.support_onehot, classifier=COSINE).data,
                               atol=1e-15)


def test_make_flow_validation():
    assert isinstance(make_flow("e2gradnet", 3, 4), E2GradNet)
    with pytest.raises(ConfigError):
        make_flow("lstm", 3, 4)
    with pytest.raises(ConfigError):
        make_flow(GRADNET, 3, 4, depth=3)


def test_complexity_probe_report():
    report = flow_complexity_probe(E2GRADNET, 3, 1, 2, 8, repeats=3)
    assert report["samples"] == 9 and len(report["times_s"]) == 3
    assert report["median_s"] >= report["min_s"] > 0
    with pytest.raises(ConfigError):
        flow_complexity_probe(E2GRADNET, 3, 1, 2, 8, repeats=2)
