"""Region histograms, linearity probe, spectrum reduction, recombination and rollout."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrobust import analysis as An
from spectrobust.errors import ConstantMap, DegenerateShift, EmptyTrace, NoResults, ShapeMismatch, ZeroDistortion
from spectrobust.models import AttentionTrace
from spectrobust.spectral import make_region_partition


# ----------------------------------------------------------------- histograms


@pytest.mark.parametrize("pos", [(0, 0), (5, 17), (31, 2)])
def test_impulse_spreads_by_bin_count(pos):
    X = np.full((1, 3, 32, 32), 0.5)
    adv = X.copy()
    adv[0, 1, pos[0], pos[1]] += 0.3
    hist = An.region_distortion_histogram(X, adv)
    counts = make_region_partition(32, 32).counts
    np.testing.assert_allclose(hist.fractions, counts / counts.sum(), atol=1e-12)
    assert list(hist.regions) == list(range(1, 11))


def test_constant_shift_is_all_dc():
    X = np.full((2, 3, 16, 16), 0.4)
    hist = An.region_distortion_histogram(X, X + 0.1)
    assert hist.fractions[0] == pytest.approx(1.0)
    assert hist.fractions[1:].sum() == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_property_fractions_sum_to_one(seed):
    r = np.random.default_rng(seed)
    X = r.uniform(size=(3, 3, 16, 16))
    adv = X + r.normal(0, 0.01, X.shape) * r.integers(0, 2, (3, 1, 1, 1))
    if np.all(adv == X):
        adv[0, 0, 0, 0] += 0.1
    hist = An.region_distortion_histogram(X, adv)
    assert abs(hist.fractions.sum() - 1.0) < 1e-9
    assert np.all(hist.fractions >= 0)


def test_histogram_averages_only_distorted_images():
    X = np.full((2, 1, 16, 16), 0.5)
    adv = X.copy()
    adv[1] += 0.1
    assert An.region_distortion_histogram(X, adv).n_images == 1
    with pytest.raises(ZeroDistortion):
        An.region_distortion_histogram(X, X)
    with pytest.raises(ShapeMismatch):
        An.region_distortion_histogram(X, adv, make_region_partition(32, 32))


# ------------------------------------------------------------------ linearity


def test_affine_features_are_straight():
    r = np.random.default_rng(0)
    A = r.normal(size=(7, 48))
    b = r.normal(size=7)
    feat = lambda x: x.reshape(len(x), -1) @ A.T + b
    X = r.uniform(size=(3, 4, 4))
    prof = An.linearity_theta(feat, X, r.normal(size=X.shape))
    assert len(prof.eps) == 101
    assert np.max(prof.theta) < 1e-6


def test_fold_gives_pi_and_corner_gives_right_angle():
    X = np.zeros(2)
    d = np.array([1.0, 0.0])
    fold = An.linearity_theta(lambda x: np.abs(x - 0.5 * d), X, d, eps=[0.5])
    assert fold.theta[0] == pytest.approx(np.pi)
    corner = lambda x: np.stack([np.maximum(x[:, 0] - 0.5, 0), np.maximum(0.5 - x[:, 0], 0)], 1)
    assert An.linearity_theta(corner, X, d, eps=[0.5]).theta[0] == pytest.approx(np.pi / 2)


def test_linearity_errors():
    with pytest.raises(DegenerateShift):
        An.linearity_theta(lambda x: np.zeros((len(x), 3)), np.zeros(4), np.ones(4))
    with pytest.raises(ShapeMismatch):
        An.linearity_theta(lambda x: x, np.zeros(4), np.ones(3))
    with pytest.raises(ValueError):
        An.linearity_theta(lambda x: x, np.zeros(4), np.ones(4), d_eps=0)


def test_linearity_on_model_features(linear_model):
    X = np.random.default_rng(0).uniform(size=(3, 8, 8))
    prof = An.linearity_theta(linear_model, X, np.ones_like(X) * 0.1, eps=[0.0, 0.5])
    assert np.max(prof.theta) < 1e-6


# ---------------------------------------------------------------- reduction


def test_reduction_endpoints():
    X = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    np.testing.assert_allclose(An.reduce_spectrum(X, "magnitude", 0.0), X, atol=1e-12)
    np.testing.assert_allclose(An.reduce_spectrum(X, "phase", 0.0), X, atol=1e-12)
    assert np.all(An.reduce_spectrum(X, "magnitude", 1.0) == 0)
    half = An.reduce_spectrum(X, "magnitude", 0.5)
    np.testing.assert_allclose(half, X / 2, atol=1e-12)
    # zero phase gives an image whose spectrum is real and even: symmetric under point reflection
    zero = An.reduce_spectrum(X * 0.5, "phase", 1.0)
    reflected = np.roll(zero[..., ::-1, ::-1], 1, axis=(-2, -1))
    np.testing.assert_allclose(zero, reflected, atol=1e-9)
    with pytest.raises(ValueError):
        An.reduce_spectrum(X, "magnitude", 1.5)
    with pytest.raises(ValueError):
        An.reduce_spectrum(X, "colour", 0.5)
    assert An.SpectrumReducer("magnitude", 0.5).fit_transform(X).shape == X.shape


def test_reduction_sweep(linear_model):
    X = np.random.default_rng(2).uniform(size=(6, 3, 8, 8))
    y = linear_model.predict(X)
    sweep = An.spectrum_reduction_sweep(linear_model, X, y, "phase", [0.0, 1.0])
    assert sweep.accuracy[0] == 1.0 and sweep.accuracy.shape == (2,)


# ------------------------------------------------------------ recombination


def test_recombine_identity_and_swap():
    r = np.random.default_rng(3)
    X = r.uniform(size=(3, 16, 16))
    np.testing.assert_allclose(An.recombine(X, X), X, atol=1e-9)
    Y = r.uniform(size=(3, 16, 16))
    mixed = An.recombine(X, Y)
    assert mixed.shape == X.shape


def test_recombination_pairs():
    y = np.array([0, 0, 1, 2])
    pairs = An.recombination_pairs(y)
    assert len(pairs) == 4 * 3 - 2
    assert np.all(y[pairs[:, 0]] != y[pairs[:, 1]])
    sub = An.recombination_pairs(y, max_pairs=4, seed=1)
    assert len(sub) == 4 and np.array_equal(sub, An.recombination_pairs(y, max_pairs=4, seed=1))


def test_recombination_study_percentages(linear_model):
    X = np.random.default_rng(4).uniform(size=(8, 3, 8, 8))
    y = np.arange(8) % 4
    table = An.recombination_study(linear_model, X, y, batch_size=7)
    assert table.n_pairs == 8 * 7 - 8
    assert table.phase + table.magnitude + table.other == pytest.approx(100.0, abs=1e-6)
    with pytest.raises(NoResults):
        An.recombination_study(linear_model, X, np.zeros(8, dtype=int))


# ------------------------------------------------------------------ rollout


def test_rollout_matches_matrix_product():
    r = np.random.default_rng(5)
    t = 5

    def layer():
        a = r.uniform(size=(2, 2, t, t))
        return a / a.sum(-1, keepdims=True)

    l1, l2 = layer(), layer()
    out = An.attention_rollout(AttentionTrace([l1, l2]))
    for n in range(2):
        steps = []
        for a in (l1, l2):
            m = a[n].mean(0) + np.eye(t)
            steps.append(m / m.sum(1, keepdims=True))
        expected = (steps[1] @ steps[0])[0, 1:].reshape(2, 2)
        np.testing.assert_allclose(out[n], expected, atol=1e-12)
    single = An.attention_rollout([l1[0], l2[0]])
    np.testing.assert_allclose(single, out[0])


def test_rollout_errors():
    with pytest.raises(EmptyTrace):
        An.attention_rollout([])
    with pytest.raises(ShapeMismatch):
        An.attention_rollout([np.ones((1, 6, 6)) / 6])
    assert An.attention_rollout([np.ones((1, 6, 6)) / 6], grid=(1, 5)).shape == (1, 5)


def test_attention_correlation():
    a = np.arange(9.0).reshape(3, 3)
    assert An.attention_correlation(a, 2 * a + 1) == pytest.approx(1.0)
    assert An.attention_correlation(a, -a) == pytest.approx(-1.0)
    with pytest.raises(ConstantMap):
        An.attention_correlation(a, np.ones((3, 3)))
    with pytest.raises(ShapeMismatch):
        An.attention_correlation(a, np.ones(9))
