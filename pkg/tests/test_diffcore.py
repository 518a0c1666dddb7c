"""Reverse-mode autodiff: forward values against numpy and gradients against central differences."""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrobust import diffcore as F
from spectrobust.diffcore import Adam, Tensor, finite_difference_check
from spectrobust.errors import InvalidAxis, ShapeMismatch

RTOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


def _away_from_zero(shape, seed=0):
    x = rng(seed).uniform(0.3, 1.5, shape)
    return x * rng(seed + 1).choice([-1.0, 1.0], shape)


W = rng(9).normal(size=(3, 4))


# (name, fn, input) triples; every fn reduces to a scalar with a random weighting
# so that no gradient is trivially constant
def _weighted(t, seed=3):
    w = rng(seed).normal(size=t.shape)
    return F.sum(t * w)


UNARY_CASES = [
    ("exp", lambda x: _weighted(F.exp(x)), rng(1).normal(size=(3, 4))),
    ("log", lambda x: _weighted(F.log(x)), rng(1).uniform(0.5, 2.0, (3, 4))),
    ("sqrt", lambda x: _weighted(F.sqrt(x)), rng(1).uniform(0.5, 2.0, (3, 4))),
    ("sin", lambda x: _weighted(F.sin(x)), rng(1).normal(size=(3, 4))),
    ("cos", lambda x: _weighted(F.cos(x)), rng(1).normal(size=(3, 4))),
    ("abs", lambda x: _weighted(F.abs(x)), _away_from_zero((3, 4))),
    ("relu", lambda x: _weighted(F.relu(x)), _away_from_zero((3, 4))),
    ("gelu", lambda x: _weighted(F.gelu(x)), rng(1).normal(size=(3, 4))),
    ("neg", lambda x: _weighted(F.neg(x)), rng(1).normal(size=(3, 4))),
    ("power", lambda x: _weighted(F.power(x, 3.0)), rng(1).normal(size=(3, 4))),
    ("clip", lambda x: _weighted(F.clip(x, -0.5, 0.5)), rng(1).uniform(-1, 1, (3, 4)) + 0.013),
    ("sum_axis", lambda x: _weighted(F.sum(x, axis=1)), rng(1).normal(size=(3, 4))),
    ("mean_keep", lambda x: _weighted(F.mean(x, axis=0, keepdims=True)), rng(1).normal(size=(3, 4))),
    ("reshape", lambda x: _weighted(F.reshape(x, (2, 6))), rng(1).normal(size=(3, 4))),
    ("transpose", lambda x: _weighted(F.transpose(x, (1, 0))), rng(1).normal(size=(3, 4))),
    ("swapaxes", lambda x: _weighted(F.swapaxes(x, 0, 2)), rng(1).normal(size=(2, 3, 4))),
    ("getitem_slice", lambda x: _weighted(x[1:, ::2]), rng(1).normal(size=(3, 4))),
    ("getitem_fancy", lambda x: _weighted(F.getitem(x, (np.array([0, 2, 0]), np.array([1, 1, 1])))), rng(1).normal(size=(3, 4))),
    ("take_repeat", lambda x: _weighted(F.take(x, np.array([0, 3, 3, 1]), axis=1)), rng(1).normal(size=(3, 4))),
    ("softmax", lambda x: _weighted(F.softmax(x, axis=-1)), rng(1).normal(size=(3, 4))),
    ("log_softmax", lambda x: _weighted(F.log_softmax(x, axis=0)), rng(1).normal(size=(3, 4))),
    ("matmul_left", lambda x: _weighted(x @ W.T), rng(1).normal(size=(2, 4))),
    ("matmul_batched", lambda x: _weighted(F.matmul(x, np.ones((3, 2)) * 0.5 + W[:, :2])), rng(1).normal(size=(2, 5, 3))),
    ("max_pool", lambda x: _weighted(F.max_pool2d(x, 2)), rng(1).permutation(32).reshape(1, 2, 4, 4) / 7.0),
    ("avg_pool", lambda x: _weighted(F.avg_pool2d(x, 2)), rng(1).normal(size=(1, 2, 4, 4))),
    ("l2_norm", lambda x: F.sum(F.l2_norm(x, axis=1)), rng(1).normal(size=(3, 4))),
    ("cross_entropy", lambda x: F.cross_entropy(x, np.array([0, 2, 3])), rng(1).normal(size=(3, 4))),
    ("cross_entropy_smooth", lambda x: F.cross_entropy(x, np.array([1, 1, 0]), reduction="sum", label_smoothing=0.1), rng(1).normal(size=(3, 4))),
]


@pytest.mark.parametrize("name,fn,x", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_gradients(name, fn, x):
    assert finite_difference_check(fn, x) < RTOL


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "atan2"])
def test_binary_gradients_with_broadcasting(op):
    a = rng(2).uniform(0.5, 1.5, (3, 4))
    b = rng(3).uniform(0.5, 1.5, (1, 4))
    fn = getattr(F, op)
    assert finite_difference_check(lambda t: _weighted(fn(t, b)), a) < RTOL
    assert finite_difference_check(lambda t: _weighted(fn(a, t)), b) < RTOL


def test_concat_gradient():
    a = rng(4).normal(size=(2, 3))
    b = rng(5).normal(size=(2, 2))
    assert finite_difference_check(lambda t: _weighted(F.concat([t, b], axis=1)), a) < RTOL


def test_linear_gradients():
    x = rng(6).normal(size=(2, 3, 4))
    w = rng(7).normal(size=(5, 4))
    bias = rng(8).normal(size=5)
    assert finite_difference_check(lambda t: _weighted(F.linear(t, w, bias)), x) < RTOL
    assert finite_difference_check(lambda t: _weighted(F.linear(x, t, bias)), w) < RTOL
    assert finite_difference_check(lambda t: _weighted(F.linear(x, w, t)), bias) < RTOL


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding):
    x = rng(10).normal(size=(2, 3, 6, 6))
    w = rng(11).normal(size=(4, 3, 3, 3))
    b = rng(12).normal(size=4)
    run = lambda xx, ww, bb: _weighted(F.conv2d(xx, ww, bb, stride=stride, padding=padding))
    assert finite_difference_check(lambda t: run(t, w, b), x) < RTOL
    assert finite_difference_check(lambda t: run(x, t, b), w) < RTOL
    assert finite_difference_check(lambda t: run(x, w, t), b) < RTOL


def test_layer_norm_gradients():
    x = rng(13).normal(size=(2, 3, 5))
    g = rng(14).normal(size=5)
    b = rng(15).normal(size=5)
    assert finite_difference_check(lambda t: _weighted(F.layer_norm(t, g, b)), x) < RTOL
    assert finite_difference_check(lambda t: _weighted(F.layer_norm(x, t, b)), g) < RTOL
    assert finite_difference_check(lambda t: _weighted(F.layer_norm(x, g, t)), b) < RTOL


# --------------------------------------------------------------- forward oracles


def test_matmul_matches_triple_loop():
    a = rng(20).normal(size=(3, 5))
    b = rng(21).normal(size=(5, 4))
    expected = np.zeros((3, 4))
    for i in range(3):
        for j in range(4):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    with F.default_dtype(np.float64):
        got = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_matches_direct_loop():
    x = rng(22).normal(size=(1, 2, 5, 5))
    w = rng(23).normal(size=(3, 2, 3, 3))
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (5 + 2 * pad - 3) // stride + 1
    expected = np.zeros((1, 3, ho, ho))
    for o in range(3):
        for i in range(ho):
            for j in range(ho):
                patch = xp[0, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                expected[0, o, i, j] = np.sum(patch * w[o])
    with F.default_dtype(np.float64):
        got = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_cross_entropy_smoothing_value():
    logits = rng(24).normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    s = 0.2
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    target = np.full((4, 3), s / 3) + (1 - s) * np.eye(3)[y]
    expected = -(target * np.log(p)).sum(1).mean()
    with F.default_dtype(np.float64):
        got = F.cross_entropy(Tensor(logits), y, label_smoothing=s).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_softmax_rows_sum_to_one_for_large_logits():
    with F.default_dtype(np.float64):
        out = F.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    assert np.isfinite(out).all()
    assert out.sum() == pytest.approx(1.0)


# ------------------------------------------------------------------ mechanics


def test_shared_subexpression_accumulates():
    with F.default_dtype(np.float64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x
        F.sum(y).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with F.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = F.get_default_dtype()

    with F.default_dtype(np.float32):
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        seen["main"] = F.get_default_dtype()
    assert seen["main"] is np.float32
    assert seen["worker"] is np.float64


def test_errors():
    with pytest.raises(ShapeMismatch):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(InvalidAxis):
        F.sum(Tensor(np.ones((2, 3))), axis=5)
    with pytest.raises(ValueError):
        F.set_default_dtype(np.int32)


def test_adam_masks_freeze_entries():
    p = np.zeros((2, 3))
    mask = np.array([[True, False, True], [True, True, True]])
    opt = Adam([p], lr=0.1, weight_decay=0.5, masks=[mask])
    for _ in range(3):
        opt.step([np.ones((2, 3))])
    assert p[0, 1] == 0.0
    assert np.all(p[mask] < 0)


def test_adam_per_row_counters_match_independent_runs():
    g = rng(30).normal(size=(2, 4))
    joint = np.zeros((2, 4))
    opt = Adam([joint], lr=0.05, rows=2)
    opt.step([g])
    opt.step([g[1:]], active=np.array([1]))
    opt.step([g[1:]], active=np.array([1]))
    for row, steps in ((0, 1), (1, 3)):
        solo = np.zeros((1, 4))
        o = Adam([solo], lr=0.05)
        for _ in range(steps):
            o.step([g[row : row + 1]])
        np.testing.assert_allclose(joint[row], solo[0], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 10_000),
)
def test_property_product_rule(n, m, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(n, m))
    b = r.normal(size=(n, m))
    with F.default_dtype(np.float64):
        ta = Tensor(a, requires_grad=True)
        F.sum(ta * F.sin(ta) * b).backward()
    np.testing.assert_allclose(ta.grad, (np.sin(a) + a * np.cos(a)) * b, rtol=1e-10, atol=1e-12)
