import threading
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoflow import ndcore as nd
from protoflow.exceptions import DomainError, NonDeterminismError, NonFiniteError, ShapeError
from protoflow.ndcore import MLP, Parameter, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def mp_softmax(xs):
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(float(x))) for x in xs]
        total = mpmath.fsum(e)
        return np.array([float(v / total) for v in e])


def fd_check(fn, *shapes, seed=0, tol=1e-6, low=-2.0, high=2.0):
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.uniform(low, high, s), f"x{i}") for i, s in enumerate(shapes)]
    report = nd.gradcheck(lambda: fn(*params), params, h=1e-6, tol=tol)
    assert report.passed, str(report)
    return report


# -- construction ------------------------------------------------------------

def test_tensor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_copies_input():
    raw = np.array([1.0, 2.0])
    t = Tensor(raw)
    raw[0] = 5.0
    assert t.data[0] == 1.0
    assert t.data.dtype == np.float64


def test_parameter_grad_matches_shape():
    p = Parameter(np.ones((2, 3)), "w")
    assert p.grad.shape == p.shape
    assert not p.grad.any()


# -- matmul ------------------------------------------------------------------

def test_matmul_identity():
    out = nd.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_dot():
    assert nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(3)
    # integer-valued floats keep every partial sum exact, so equality is exact
    a = rng.integers(-9, 10, (3, 4)).astype(float)
    b = rng.integers(-9, 10, (4, 2)).astype(float)
    np.testing.assert_array_equal(nd.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_random_reals_close_to_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(nd.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-14, atol=1e-15)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_rule():
    fd_check(lambda a, b: nd.reduce_sum(nd.square(nd.matmul(a, b))), (3, 4), (4, 2))


def test_batched_matmul_gradient():
    fd_check(lambda a, b: nd.reduce_sum(nd.square(nd.matmul(a, b))), (2, 3, 4), (2, 4, 2))


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(nd.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_stable_for_large_logits():
    np.testing.assert_allclose(nd.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_extended_precision():
    np.testing.assert_allclose(nd.softmax(Tensor([1.0, 2.0, 3.0])).data, mp_softmax([1, 2, 3]), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    s = nd.softmax(Tensor(x)).data
    assert np.all(s > 0)
    assert abs(s.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(nd.softmax(Tensor(x + c)).data, s, atol=1e-12)


def test_log_softmax_consistent():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 5)))
    np.testing.assert_allclose(nd.log_softmax(x, axis=-1).data, np.log(nd.softmax(x, axis=-1).data), atol=1e-14)


def test_softmax_cross_entropy_gradcheck():
    onehot = Tensor(np.eye(4)[[0, 3, 1]])

    def ce(z):
        return nd.scale(nd.reduce_sum(nd.mul(nd.log_softmax(z, axis=-1), onehot)), -1 / 3)

    fd_check(ce, (3, 4), tol=1e-6)


# -- elementwise -------------------------------------------------------------

def test_elu_asymptote():
    assert abs(nd.elu(Tensor([-20.0])).data[0] - (np.exp(-20.0) - 1.0)) < 1e-15
    assert abs(nd.elu(Tensor([-20.0])).data[0] + 1.0) < 1e-8


def test_add_values():
    assert nd.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]


def test_mul_gradient():
    x = Parameter([1.0, 2.0], "x")
    nd.backward(nd.reduce_sum(nd.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_div_by_zero_rejected():
    with pytest.raises(DomainError):
        nd.div(Tensor([1.0]), Tensor([0.0]))


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_log_non_positive_rejected(bad):
    with pytest.raises(DomainError):
        nd.log(Tensor([1.0, bad]))


def test_broadcast_restricted():
    with pytest.raises(ShapeError):
        nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert nd.add(Tensor(np.ones((2, 3))), 1.0).data.sum() == 12.0


@pytest.mark.parametrize("name,fn,shapes,low", [
    ("add", lambda a, b: nd.add(a, b), [(3, 2), (3, 2)], -2.0),
    ("sub", lambda a, b: nd.sub(a, b), [(3, 2), (3, 2)], -2.0),
    ("mul", lambda a, b: nd.mul(a, b), [(3, 2), (3, 2)], -2.0),
    ("div", lambda a, b: nd.div(a, b), [(3, 2), (3, 2)], 0.5),
    ("scale", lambda a: nd.scale(a, -1.7), [(4,)], -2.0),
    ("neg", lambda a: nd.neg(a), [(4,)], -2.0),
    ("exp", lambda a: nd.exp(a), [(4,)], -2.0),
    ("log", lambda a: nd.log(a), [(4,)], 0.5),
    ("sqrt", lambda a: nd.sqrt(a), [(4,)], 0.5),
    ("elu", lambda a: nd.elu(a), [(6,)], -2.0),
    ("square", lambda a: nd.square(a), [(4,)], -2.0),
    ("transpose", lambda a: nd.transpose(a), [(2, 3)], -2.0),
    ("swapaxes", lambda a: nd.swapaxes(a, 0, 2), [(2, 3, 4)], -2.0),
    ("reshape", lambda a: nd.reshape(a, (3, 2)), [(2, 3)], -2.0),
    ("broadcast", lambda a: nd.broadcast_to(nd.reshape(a, (1, 3)), (4, 3)), [(3,)], -2.0),
    ("mean", lambda a: nd.mean(a, axis=0), [(3, 2)], -2.0),
    ("sum_axis", lambda a: nd.reduce_sum(a, axis=1, keepdims=True), [(3, 2)], -2.0),
    ("concat", lambda a, b: nd.concat([a, b], axis=1), [(2, 3), (2, 5)], -2.0),
    ("stack", lambda a, b: nd.stack([a, b], axis=0), [(2, 3), (2, 3)], -2.0),
    ("take", lambda a: nd.take(a, np.array([0, 2, 2])), [(3, 2)], -2.0),
    ("softmax", lambda a: nd.softmax(a, axis=0), [(4, 3)], -2.0),
    ("log_softmax", lambda a: nd.log_softmax(a, axis=-1), [(4, 3)], -2.0),
    ("norm", lambda a: nd.norm(a, axis=1), [(3, 4)], 0.5),
    ("normalize_rows", lambda a: nd.normalize_rows(a), [(3, 4)], 0.5),
    ("cosine_matrix", lambda a, b: nd.cosine_matrix(a, b), [(3, 4), (2, 4)], 0.5),
    ("cosine", lambda a, b: nd.cosine_similarity(a, b), [(4,), (4,)], 0.5),
    ("clamp_min", lambda a: nd.clamp_min(a, 0.25), [(6,)], -2.0),
])
def test_op_gradients_match_finite_differences(name, fn, shapes, low):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    weights = {}

    def loss(*xs):
        out = fn(*xs)
        if out.shape not in weights:
            weights[out.shape] = Tensor(rng.standard_normal(out.shape))
        return nd.reduce_sum(nd.mul(out, weights[out.shape])) if out.ndim else out

    params = [Parameter(np.random.default_rng(i + 7).uniform(low, 2.0, s), f"x{i}") for i, s in enumerate(shapes)]
    if name == "clamp_min":
        # keep every coordinate away from the kink at the floor
        params[0].data[np.abs(params[0].data - 0.25) < 1e-3] += 0.01
    report = nd.gradcheck(lambda: loss(*params), params, tol=1e-6)
    assert report.passed, f"{name}: {report}"


# -- concat / split ----------------------------------------------------------

def test_concat_values_and_shapes():
    assert nd.concat([Tensor([1.0]), Tensor([2.0])]).data.tolist() == [1.0, 2.0]
    assert nd.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1).shape == (2, 8)


def test_concat_axis_out_of_range():
    with pytest.raises(ShapeError):
        nd.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))], axis=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_split_inverts_concat(n1, n2, cols, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n1, cols)), rng.standard_normal((n2, cols))
    left, right = nd.split(nd.concat([Tensor(a), Tensor(b)], axis=0), [n1, n2], axis=0)
    np.testing.assert_array_equal(left.data, a)
    np.testing.assert_array_equal(right.data, b)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-20, 20)))
def test_exp_log_inverse(x):
    np.testing.assert_allclose(nd.log(nd.exp(Tensor(x))).data, x, atol=1e-12)
    pos = np.abs(x) + 0.1
    np.testing.assert_allclose(nd.exp(nd.log(Tensor(pos))).data, pos, rtol=1e-12)


# -- cosine ------------------------------------------------------------------

def test_cosine_examples():
    v = Tensor([0.3, -1.2, 2.0])
    assert abs(nd.cosine_similarity(v, v).item() - 1.0) < 1e-15
    assert nd.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert abs(nd.cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() - np.sqrt(2) / 2) < 1e-12


def test_cosine_zero_norm():
    with pytest.raises(DomainError):
        nd.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = nd.cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


# -- backward / tape ---------------------------------------------------------

def test_backward_sum_gives_ones():
    p = Parameter(np.zeros((2, 3)), "p")
    nd.backward(nd.reduce_sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_square_norm():
    p = Parameter([1.5, -2.0, 0.5], "p")
    nd.backward(nd.reduce_sum(nd.square(p)))
    np.testing.assert_allclose(p.grad, 2 * p.data)


def test_backward_non_scalar():
    p = Parameter([1.0, 2.0], "p")
    with pytest.raises(ShapeError):
        nd.backward(nd.mul(p, p))


def test_unreachable_param_gets_zero():
    p, q = Parameter([1.0], "p"), Parameter([2.0], "q")
    q.grad = None
    nd.backward(nd.reduce_sum(nd.square(p)), [p, q])
    assert q.grad.tolist() == [0.0]


def test_gradients_accumulate():
    p = Parameter([1.0, 2.0], "p")
    nd.backward(nd.reduce_sum(p))
    nd.backward(nd.reduce_sum(p))
    assert p.grad.tolist() == [2.0, 2.0]


def test_tape_topological_and_visits_once():
    p = Parameter([1.0, 2.0], "p")
    a = nd.mul(p, p)
    b = nd.add(a, p)
    loss = nd.reduce_sum(nd.mul(b, a))
    tape = Tape(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert tape.node_id[id(parent)] < tape.node_id[id(node)]


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = nd.is_grad_enabled()

    with nd.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert not nd.is_grad_enabled()
    assert seen["worker"] is True
    assert nd.is_grad_enabled()


def test_no_grad_records_nothing():
    p = Parameter([1.0], "p")
    with nd.no_grad():
        out = nd.mul(p, p)
    assert not out.requires_grad and out._parents == ()


def test_deep_graph_does_not_recurse():
    p = Parameter([1.0], "p")
    x = p
    for _ in range(5000):
        x = nd.add(x, nd.scale(p, 1e-4))
    nd.backward(nd.reduce_sum(x))
    assert abs(p.grad[0] - 1.5) < 1e-9


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(11)
    first = MLP(4, 6, 5, "a", rng)
    second = nd.Linear(5, 2, "b", rng)
    x = Tensor(rng.standard_normal((3, 4)))
    params = first.parameters() + second.parameters()
    report = nd.gradcheck(lambda: nd.reduce_sum(nd.square(second(nd.elu(first(x))))), params, h=1e-6, tol=1e-5)
    assert report.passed, str(report)


# -- gradcheck harness -------------------------------------------------------

def test_gradcheck_quadratic_tight():
    report = fd_check(lambda p: nd.reduce_sum(nd.square(p)), (5,), tol=1e-9)
    assert report.max_error <= 1e-9


def test_gradcheck_detects_nondeterminism():
    p = Parameter([1.0, 2.0], "p")
    counter = iter(range(1000))
    with pytest.raises(NonDeterminismError):
        nd.gradcheck(lambda: nd.scale(nd.reduce_sum(p), 1.0 + next(counter)), [p])


def test_gradcheck_flags_wrong_gradient():
    p = Parameter([0.7, -0.3], "p")

    def wrong():
        out = nd.reduce_sum(nd.square(p))
        # tamper: backward claims gradient p instead of 2p
        return Tensor._from_op(out.data, (p,), lambda g: (g * p.data,))

    assert not nd.gradcheck(wrong, [p]).passed


def test_determinism_bitwise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 7))
    mlp_a = MLP(7, 9, 3, "m", np.random.default_rng(1))
    mlp_b = MLP(7, 9, 3, "m", np.random.default_rng(1))
    assert mlp_a(Tensor(x)).data.tobytes() == mlp_b(Tensor(x)).data.tobytes()


def test_state_dict_round_trip():
    a = MLP(3, 4, 2, "m", np.random.default_rng(0))
    b = MLP(3, 4, 2, "m", np.random.default_rng(5))
    b.load_state_dict(a.state_dict())
    x = Tensor(np.ones((1, 3)))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(ShapeError):
        b.load_state_dict({k: np.ones(1) for k in a.state_dict()})
