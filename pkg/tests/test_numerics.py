import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vulnmtl import numerics as nx
from _oracles import gradcheck

TOL = 1e-4
rng = np.random.default_rng(1234)


def R(*shape, scale=1.0):
    return rng.normal(size=shape) * scale


def away_from_zero(*shape):
    x = R(*shape)
    return np.where(np.abs(x) < 0.1, 0.1 * np.sign(x) + 0.1, x)


# (name, fn, inputs, skip)
GRAD_CASES = [
    ("add_broadcast", lambda a, b: a + b, [R(3, 4), R(4)], None),
    ("sub", lambda a, b: a - b, [R(3, 4), R(3, 1)], None),
    ("mul_broadcast", lambda a, b: a * b, [R(2, 3, 4), R(1, 4)], None),
    ("div", lambda a, b: a / b, [R(3, 4), away_from_zero(3, 4) + 3.0], None),
    ("rdiv", lambda a: 2.0 / a, [np.abs(R(5)) + 1.0], None),
    ("neg", lambda a: -a, [R(6)], None),
    ("power", lambda a: nx.power(a, 3.0), [R(3, 3)], None),
    ("power_frac", lambda a: nx.power(a, 1.5), [np.abs(R(4, 3)) + 0.5], None),
    ("exp", nx.exp, [R(4, 3)], None),
    ("log", nx.log, [np.abs(R(4, 3)) + 0.2], None),
    ("sqrt", nx.sqrt, [np.abs(R(4, 3)) + 0.2], None),
    ("tanh", nx.tanh, [R(4, 3)], None),
    ("relu", nx.relu, [away_from_zero(4, 5)], lambda i, v: abs(v) < 1e-3),
    ("gelu", nx.gelu, [R(4, 5, scale=2.0)], None),
    ("sigmoid", nx.sigmoid, [R(4, 5, scale=2.0)], None),
    ("sum_axis", lambda a: nx.tsum(a, axis=1), [R(3, 4, 2)], None),
    ("sum_keepdims", lambda a: nx.tsum(a, axis=0, keepdims=True), [R(3, 4)], None),
    ("mean", lambda a: nx.tmean(a, axis=-1), [R(3, 5)], None),
    ("reshape", lambda a: nx.reshape(a, (6, 2)), [R(3, 4)], None),
    ("transpose", lambda a: nx.transpose(a, (2, 0, 1)), [R(2, 3, 4)], None),
    ("getitem_fancy", lambda a: a[np.array([0, 2, 2]), 1:3], [R(4, 5)], None),
    ("concat", lambda a, b: nx.concat([a, b], axis=1), [R(3, 2), R(3, 4)], None),
    ("embedding", lambda w: nx.embedding(w, np.array([[1, 3, 1], [0, 2, 3]])), [R(5, 4)], None),
    (
        "scatter_rows",
        lambda v: nx.scatter_rows(v, (np.array([0, 1, 1]), np.array([2, 0, 3])), (2, 5, 3)),
        [R(3, 3)],
        None,
    ),
    ("matmul", lambda a, b: a @ b, [R(3, 4), R(4, 2)], None),
    ("matmul_batched", lambda a, b: a @ b, [R(2, 3, 3, 4), R(4, 5)], None),
    ("softmax", lambda a: nx.softmax(a, -1), [R(3, 6)], None),
    (
        "softmax_masked",
        lambda a: nx.softmax(a, -1, mask=np.array([[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 1, 1]], bool)),
        [R(3, 4)],
        None,
    ),
    ("log_softmax", lambda a: nx.log_softmax(a, 0), [R(5, 3)], None),
    ("layer_norm", lambda x, g, b: nx.layer_norm(x, g, b), [R(3, 6), R(6) + 1.0, R(6)], None),
    ("dropout", lambda a: nx.dropout(a, 0.3, np.random.default_rng(7)), [R(5, 4)], None),
    ("cross_entropy_row", lambda z: nx.cross_entropy(z, 2), [R(5)], None),
    ("cross_entropy_batch", lambda z: nx.cross_entropy(z, np.array([0, 3, 1])), [R(3, 4)], None),
    ("focal", lambda z: nx.focal_loss(z, np.array([0, 1, 1, 0]), 2.0), [R(4, 2)], None),
    (
        "focal_masked",
        lambda z: nx.focal_loss(z, np.array([1, 0, 1, 0, 0]), 2.0, mask=np.array([1, 1, 0, 1, 0], bool)),
        [R(5, 2)],
        None,
    ),
    ("focal_gamma0", lambda z: nx.focal_loss(z, np.array([2, 0, 1]), 0.0), [R(3, 3)], None),
    ("kl", lambda p, q: nx.kl_divergence(p, q), [R(4, 5), R(4, 5)], None),
    ("kl_rows", lambda p, q: nx.kl_divergence(p, q, reduce=False), [R(2, 3, 4), R(2, 3, 4)], None),
]


@pytest.mark.parametrize("name,fn,inputs,skip", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_gradient_matches_central_difference(name, fn, inputs, skip):
    assert gradcheck(fn, inputs, n_points=10, h=1e-5, skip=skip) < TOL


def test_backward_needs_scalar():
    x = nx.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_grad_accumulates_and_reuse_counts_twice():
    x = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    (x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_interior_grad_only_when_retained():
    x = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = (x * 3.0).retain_grad()
    z = x * 5.0
    ((y + z) * y).sum().backward()
    assert z.grad is None
    np.testing.assert_allclose(y.grad, 2 * y.data + z.data)


def test_no_grad_builds_no_graph():
    x = nx.Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.exp(x) * 2
    assert not y.requires_grad and y._parents == ()


def test_numpy_left_operand_defers_to_tensor():
    x = nx.Tensor(np.eye(2), requires_grad=True)
    out = np.ones((3, 2)) @ x
    assert isinstance(out, nx.Tensor)
    assert isinstance(np.ones(2) / (x + 1.0), nx.Tensor)


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


def test_softmax_matches_mpmath():
    mpmath.mp.dps = 50
    z = np.array([3.0, -1.0, 0.25, 700.0, 699.5])
    ref = [mpmath.e ** mpmath.mpf(v) for v in z]
    total = sum(ref)
    expect = np.array([float(r / total) for r in ref])
    np.testing.assert_allclose(nx.softmax(nx.Tensor(z)).data, expect, rtol=1e-14, atol=1e-300)
    lexpect = np.array([float(mpmath.log(r / total)) for r in ref])
    np.testing.assert_allclose(nx.log_softmax(nx.Tensor(z)).data, lexpect, rtol=1e-13)


def test_kl_matches_mpmath():
    mpmath.mp.dps = 40
    p, q = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.0, -0.5])

    def probs(v):
        e = [mpmath.e ** mpmath.mpf(x) for x in v]
        s = sum(e)
        return [x / s for x in e]

    P, Q = probs(p), probs(q)
    expect = float(sum(a * mpmath.log(a / b) for a, b in zip(P, Q)))
    assert nx.kl_divergence(nx.Tensor(p), nx.Tensor(q)).item() == pytest.approx(expect, rel=1e-13)


def test_masked_softmax_gives_exact_zeros():
    out = nx.softmax(nx.Tensor(R(2, 4)), -1, mask=np.array([[1, 0, 0, 1], [0, 1, 0, 0]], bool)).data
    assert out[0, 1] == 0.0 and out[0, 2] == 0.0
    assert out[1, 1] == 1.0


def test_kl_identical_inputs_exact_zero():
    z = R(3, 4)
    p, q = nx.Tensor(z, requires_grad=True), nx.Tensor(z.copy(), requires_grad=True)
    kl = nx.kl_divergence(p, q)
    kl.backward()
    assert kl.item() == 0.0
    assert not np.any(p.grad) and not np.any(q.grad)


def test_focal_gamma0_equals_cross_entropy():
    z = R(6, 3)
    t = np.array([0, 1, 2, 2, 1, 0])
    assert nx.focal_loss(nx.Tensor(z), t, 0.0).item() == pytest.approx(nx.cross_entropy(nx.Tensor(z), t).item(), rel=1e-14)


def test_focal_errors():
    with pytest.raises(ValueError):
        nx.focal_loss(nx.Tensor(R(2, 2)), np.array([0, 1]), 2.0, mask=np.zeros(2, bool))
    with pytest.raises(IndexError):
        nx.cross_entropy(nx.Tensor(R(3)), 3)


def test_dropout_identity_without_rng():
    x = nx.Tensor(R(3, 3))
    assert nx.dropout(x, 0.5, None) is x


def test_power_zero_base_gradient_finite():
    x = nx.Tensor(np.array([0.0, 2.0]), requires_grad=True)
    nx.power(x, 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 4.0])


# -- optimiser ---------------------------------------------------------------


def test_cosine_schedule_endpoints():
    st_ = nx.OptimizerState(base_lr=1.0, total_steps=10)
    assert st_.lr() == 1.0
    st_.step = 5
    assert st_.lr() == pytest.approx(0.5)
    st_.step = 10
    assert st_.lr() == pytest.approx(0.0, abs=1e-15)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    before = nx.clip_grad_norm(g, 1.0)
    assert before == 5.0
    assert math.sqrt(sum(float(np.sum(v * v)) for v in g.values())) == pytest.approx(1.0)


def test_adamw_first_step_matches_hand_calculation():
    p = {"w": nx.Tensor(np.array([1.0, -2.0]))}
    g = {"w": np.array([0.5, -0.1])}
    state = nx.OptimizerState(base_lr=0.1, total_steps=100, weight_decay=0.01, max_grad_norm=None)
    lr = nx.optimizer_step(p, g, state)
    # first Adam step moves each coordinate by lr * sign(g) (bias-corrected)
    m_hat, v_hat = g["w"], g["w"] ** 2
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert lr == 0.1
    np.testing.assert_allclose(p["w"].data, expect, rtol=1e-12)
    assert state.step == 1


def test_optimizer_rejects_nonfinite():
    p = {"w": nx.Tensor(np.zeros(2))}
    with pytest.raises(FloatingPointError):
        nx.optimizer_step(p, {"w": np.array([np.nan, 0.0])}, nx.OptimizerState(base_lr=0.1, total_steps=1))


# -- properties --------------------------------------------------------------

finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_is_distribution_and_shift_invariant(z):
    p = nx.softmax(nx.Tensor(z), -1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(nx.softmax(nx.Tensor(z + 5.0), -1).data, p, rtol=1e-9, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (3, 4), elements=finite),
)
def test_kl_non_negative(p, q):
    assert nx.kl_divergence(nx.Tensor(p), nx.Tensor(q)).item() >= -1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-5, 5)), st.floats(0.0, 4.0))
def test_focal_not_above_cross_entropy(z, gamma):
    t = np.array([1, 3])
    assert nx.focal_loss(nx.Tensor(z), t, gamma).item() <= nx.cross_entropy(nx.Tensor(z), t).item() + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)))
def test_layer_norm_output_standardised(x):
    if np.any(x.std(-1) < 1e-3):
        return
    out = nx.layer_norm(nx.Tensor(x), nx.Tensor(np.ones(6)), nx.Tensor(np.zeros(6)), eps=0.0).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.std(-1), 1.0, rtol=1e-9)
