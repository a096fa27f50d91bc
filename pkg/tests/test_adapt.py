import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ava.adapt import MapConfig, map_adapt, map_statistics, map_update
from ava.errors import InsufficientDataError
from ava.evaluation import sample_hmm
from ava.hmm import Hmm, WindowSpec, model_hash

from conftest import random_model

PARAMS = ("pi", "trans", "weights", "means", "variances")


def test_huge_prior_weight_keeps_the_prior(rng):
    si = random_model(2, 3, 4, rng)
    data = [rng.normal(1.0, 2.0, size=(60, 4)) for _ in range(3)]
    cfg = MapConfig(1e12, 1e12, 1e12)
    sa = map_adapt(si, data, WindowSpec(10), cfg)
    for name in PARAMS:
        np.testing.assert_allclose(getattr(sa, name), getattr(si, name), atol=1e-6)


def test_vanishing_prior_weight_gives_ml_moments(rng):
    si = random_model(1, 1, 5, rng)
    X = rng.normal(3.0, 1.5, size=(2000, 5))
    sa = map_adapt(si, [X], WindowSpec(101), MapConfig(1e-12, 1e-12, 1e-12))
    mu = X.mean(axis=0)
    np.testing.assert_allclose(sa.means[0, 0], mu, atol=1e-6)
    np.testing.assert_allclose(sa.variances[0, 0], (X * X).mean(axis=0) - mu ** 2, atol=1e-6)


def test_hand_case_half_way():
    si = Hmm([1.0], [[1.0]], [[1.0]], [[[0.0]]], [[[1.0]]], [1e-3])
    # 16 frames of value 1: n = 16, eta = 16, alpha = 1/2
    sa = map_adapt(si, [np.ones((16, 1))], WindowSpec(16), MapConfig(iterations=1))
    assert sa.means[0, 0, 0] == 0.5
    n, s1, s2 = np.array([[16.0]]), np.full((1, 1, 1), 16.0), np.full((1, 1, 1), 16.0)
    assert map_update(si, n, s1, s2, MapConfig()).means[0, 0, 0] == 0.5


def test_self_adaptation_barely_moves(rng):
    si = Hmm([1.0], [[1.0]], [[0.5, 0.5]], [[[-4.0, 0.0, 1.0], [4.0, 2.0, -1.0]]],
             np.ones((1, 2, 3)), np.full(3, 1e-3))
    X = sample_hmm(si, 20000, rng)
    sa = map_adapt(si, [X], WindowSpec(101, 5))
    sigma = np.sqrt(si.variances)
    assert np.max(np.abs(sa.means - si.means) / sigma) < 0.05


def test_transitions_and_initial_probabilities_are_copied(rng):
    si = random_model(3, 2, 3, rng)
    sa = map_adapt(si, [rng.normal(size=(40, 3))], WindowSpec(8))
    np.testing.assert_array_equal(sa.pi, si.pi)
    np.testing.assert_array_equal(sa.trans, si.trans)
    assert sa.metadata["si_hash"] == model_hash(si)
    assert sa.metadata["map_config"]["eta_m"] == 16.0


def test_adapted_model_is_valid(rng):
    si = random_model(2, 4, 3, rng)
    sa = map_adapt(si, [rng.normal(size=(50, 3)) * 0.01], WindowSpec(10))
    sa.validate()
    np.testing.assert_allclose(sa.weights.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(sa.variances >= sa.var_floor)


def stats(rng, J=2, K=3, D=4):
    n = rng.uniform(0.1, 50, size=(J, K))
    mean = rng.normal(size=(J, K, D))
    s1 = n[:, :, None] * mean
    s2 = n[:, :, None] * (mean ** 2 + rng.uniform(0.2, 2.0, size=(J, K, D)))
    return n, s1, s2


@given(seed=st.integers(0, 2**31), eta=st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_mean_update_is_convex(seed, eta):
    r = np.random.default_rng(seed)
    prior = random_model(2, 3, 4, r)
    n, s1, s2 = stats(r)
    mu = map_update(prior, n, s1, s2, MapConfig(eta, eta, eta)).means
    data = s1 / n[:, :, None]
    lo, hi = np.minimum(prior.means, data), np.maximum(prior.means, data)
    assert np.all(mu >= lo - 1e-12) and np.all(mu <= hi + 1e-12)


@given(seed=st.integers(0, 2**31), eta=st.floats(1e-2, 1e2), factor=st.floats(1.5, 10))
@settings(max_examples=50, deadline=None)
def test_larger_prior_weight_stays_closer_to_the_prior(seed, eta, factor):
    r = np.random.default_rng(seed)
    prior = random_model(2, 3, 4, r)
    n, s1, s2 = stats(r)
    near = map_update(prior, n, s1, s2, MapConfig(eta_m=eta * factor)).means
    far = map_update(prior, n, s1, s2, MapConfig(eta_m=eta)).means
    moved_near, moved_far = np.abs(near - prior.means), np.abs(far - prior.means)
    differs = np.abs(s1 / n[:, :, None] - prior.means) > 1e-9
    assert np.all(moved_near[differs] < moved_far[differs])


def test_unseen_mixture_keeps_the_prior(rng):
    prior = random_model(2, 3, 4, rng)
    n, s1, s2 = stats(rng)
    n[1, 2] = 0.0
    s1[1, 2] = 0.0
    s2[1, 2] = 0.0
    n[0] = 0.0
    s1[0] = 0.0
    s2[0] = 0.0
    new = map_update(prior, n, s1, s2, MapConfig())
    np.testing.assert_array_equal(new.means[1, 2], prior.means[1, 2])
    np.testing.assert_array_equal(new.variances[1, 2], prior.variances[1, 2])
    np.testing.assert_array_equal(new.means[0], prior.means[0])
    np.testing.assert_array_equal(new.weights[0], prior.weights[0])


def test_statistics_split_frames_over_mixtures(rng):
    si = random_model(2, 3, 4, rng)
    X = rng.normal(size=(30, 4))
    n, s1, _ = map_statistics(si, [X], WindowSpec(5))
    assert n.sum() == pytest.approx(30.0, abs=1e-9)
    np.testing.assert_allclose(s1.sum(axis=(0, 1)), X.sum(axis=0), atol=1e-9)


def test_enrollment_errors(rng):
    si = random_model(1, 2, 3, rng)
    with pytest.raises(InsufficientDataError):
        map_adapt(si, [], WindowSpec(5))
    with pytest.raises(InsufficientDataError):
        map_adapt(si, [rng.normal(size=(4, 3))], WindowSpec(5))
    with pytest.raises(ValueError):
        MapConfig(eta_m=0.0)
