import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ava.errors import ArgumentError, InsufficientDataError, ModelFormatError
from ava.hmm import (Hmm, WindowSpec, accumulate_stats, baum_welch_short, dumps_model,
                     forward_backward, kmeans_init, load_model, merge_stats,
                     model_from_dict, model_hash, model_to_dict, reestimate, save_model,
                     short_time_gamma, sliding_viterbi, viterbi_loglik)
from ava.evaluation import sample_hmm

from conftest import brute_posteriors, enumerate_paths, gmm_logpdf, random_model


# ------------------------------------------------------------- model basics

def test_window_geometry():
    spec = WindowSpec(101)
    assert spec.duration() == pytest.approx(1.025)
    assert WindowSpec(5, 3).count(20) == (20 - 5) // 3 + 1
    np.testing.assert_array_equal(WindowSpec(5, 3).starts(20), [0, 3, 6, 9, 12, 15])
    with pytest.raises(ValueError):
        WindowSpec(0)


def test_component_loglik_matches_naive(rng):
    model = random_model(3, 2, 4, rng)
    X = rng.normal(size=(6, 4))
    np.testing.assert_allclose(model.state_loglik(X), gmm_logpdf(model, X), atol=1e-10)


def test_invalid_models_are_rejected(rng):
    m = random_model(2, 2, 3, rng)
    m.validate()
    with pytest.raises(ValueError):
        Hmm(m.pi * 2, m.trans, m.weights, m.means, m.variances, m.var_floor).validate()
    with pytest.raises(ValueError):
        Hmm(m.pi, m.trans, m.weights, m.means, m.variances * 0 + 1e-6, m.var_floor).validate()
    with pytest.raises(ValueError):
        Hmm(m.pi, m.trans[:1], m.weights, m.means, m.variances, m.var_floor).validate()


# ------------------------------------------------------------------ k-means

def test_single_cluster_is_the_global_moment(rng):
    X = rng.normal(2.0, 3.0, size=(500, 5))
    model = kmeans_init([X], 1, 1, seed=0)
    np.testing.assert_allclose(model.means[0, 0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.variances[0, 0], X.var(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.pi, [1.0])


def test_two_clusters_are_found(rng):
    centres = np.array([[-5.0] * 4, [5.0] * 4])
    X = np.vstack([c + rng.normal(size=(2000, 4)) for c in centres])
    model = kmeans_init([X], 1, 2, seed=3)
    found = model.means[0][np.argsort(model.means[0, :, 0])]
    assert np.max(np.abs(found - centres)) < 0.1


def test_kmeans_init_is_deterministic(rng):
    X = rng.normal(size=(400, 3))
    a, b = kmeans_init([X], 2, 3, seed=7), kmeans_init([X], 2, 3, seed=7)
    assert dumps_model(a) == dumps_model(b)


def test_kmeans_init_needs_enough_frames(rng):
    with pytest.raises(InsufficientDataError):
        kmeans_init([rng.normal(size=(5, 3))], 2, 4)


# ---------------------------------------------------------- forward-backward

def test_single_state_forward_backward(rng):
    model = random_model(1, 3, 4, rng)
    X = rng.normal(size=(9, 4))
    gamma, ll = forward_backward(model, X)
    np.testing.assert_array_equal(gamma, 1.0)
    assert ll == pytest.approx(gmm_logpdf(model, X).sum(), abs=1e-10)


def test_two_states_three_frames_against_enumeration(rng):
    model = random_model(2, 2, 3, rng)
    X = rng.normal(size=(3, 3))
    gamma, ll = forward_backward(model, X)
    bg, bll = brute_posteriors(model, X)
    assert len(enumerate_paths(model, X)) == 8
    np.testing.assert_allclose(gamma, bg, atol=1e-9)
    assert ll == pytest.approx(bll, abs=1e-9)


def test_symmetric_model_gives_uniform_posteriors(rng):
    base = random_model(1, 2, 3, rng)
    J = 4
    model = Hmm(np.full(J, 1 / J), np.full((J, J), 1 / J), np.repeat(base.weights, J, 0),
                np.repeat(base.means, J, 0), np.repeat(base.variances, J, 0), base.var_floor)
    gamma, _ = forward_backward(model, rng.normal(size=(7, 3)))
    np.testing.assert_allclose(gamma, 1 / J, atol=1e-12)


@given(seed=st.integers(0, 2**31), J=st.integers(1, 4), T=st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_posteriors_sum_to_one(seed, J, T):
    r = np.random.default_rng(seed)
    model = random_model(J, 2, 3, r, spread=3.0)
    gamma, ll = forward_backward(model, r.normal(size=(T, 3)))
    np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-8)
    assert np.isfinite(ll)


# --------------------------------------------------------------- short time

def test_short_time_single_state_is_one(rng):
    model = random_model(1, 2, 3, rng)
    occ = short_time_gamma(model, rng.normal(size=(20, 3)), WindowSpec(7))
    np.testing.assert_array_equal(occ.gamma, 1.0)


def test_full_length_window_is_conventional(rng):
    model = random_model(3, 2, 3, rng)
    X = rng.normal(size=(12, 3))
    occ = short_time_gamma(model, X, WindowSpec(12))
    np.testing.assert_allclose(occ.gamma, forward_backward(model, X)[0], atol=1e-9)


def test_middle_frame_averages_three_windows(rng):
    model = random_model(2, 2, 3, rng)
    X = rng.normal(size=(5, 3))
    occ = short_time_gamma(model, X, WindowSpec(3))
    # frame 2 sits at offsets 2, 1, 0 of windows starting at 0, 1, 2
    hand = np.mean([forward_backward(model, X[s:s + 3])[0][2 - s] for s in range(3)], axis=0)
    np.testing.assert_allclose(occ.gamma[2], hand, atol=1e-12)
    # edge frames: frame 0 is in one window only, frame 1 in two
    np.testing.assert_allclose(occ.gamma[0], forward_backward(model, X[0:3])[0][0], atol=1e-12)
    np.testing.assert_array_equal(occ.window_count, [1, 2, 3, 2, 1])


def test_short_time_needs_a_full_window(rng):
    with pytest.raises(InsufficientDataError):
        short_time_gamma(random_model(2, 1, 3, rng), rng.normal(size=(4, 3)), WindowSpec(5))


def test_stride_longer_than_window_is_rejected(rng):
    with pytest.raises(ArgumentError):
        short_time_gamma(random_model(2, 1, 2, rng), rng.normal(size=(20, 2)), WindowSpec(3, 4))


@given(seed=st.integers(0, 2**31), n_w=st.integers(1, 12), stride=st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_short_time_posteriors_sum_to_one(seed, n_w, stride):
    stride = min(stride, n_w)
    r = np.random.default_rng(seed)
    model = random_model(3, 2, 2, r, spread=2.0)
    occ = short_time_gamma(model, r.normal(size=(25, 2)), WindowSpec(n_w, stride))
    np.testing.assert_allclose(occ.gamma.sum(axis=1), 1.0, atol=1e-8)
    np.testing.assert_allclose(occ.mix_post.sum(axis=(1, 2)), 1.0, atol=1e-8)


# --------------------------------------------------------------- Baum-Welch

def conventional_update(model, X):
    """One textbook Baum-Welch step computed from enumerated paths."""
    paths = enumerate_paths(model, X)
    total = np.logaddexp.reduce(list(paths.values()))
    T, J, K = len(X), model.n_states, model.n_mix
    gamma = np.zeros((T, J))
    xi = np.zeros((J, J))
    for p, v in paths.items():
        w = np.exp(v - total)
        for t, j in enumerate(p):
            gamma[t, j] += w
        for t in range(T - 1):
            xi[p[t], p[t + 1]] += w
    comp = np.zeros((T, J, K))
    for t in range(T):
        for j in range(J):
            for k in range(K):
                v = model.variances[j, k]
                comp[t, j, k] = model.weights[j, k] * np.exp(
                    -0.5 * np.sum((X[t] - model.means[j, k]) ** 2 / v + np.log(2 * np.pi * v)))
    c = gamma[:, :, None] * comp / comp.sum(axis=2, keepdims=True)
    n = c.sum(axis=0)
    mu = np.einsum("tjk,td->jkd", c, X) / n[:, :, None]
    var = np.einsum("tjk,td->jkd", c, X * X) / n[:, :, None] - mu ** 2
    return {"pi": gamma[0], "trans": xi / xi.sum(axis=1, keepdims=True),
            "weights": n / n.sum(axis=1, keepdims=True), "means": mu,
            "variances": np.maximum(var, model.var_floor)}


def test_full_window_update_equals_conventional_baum_welch(rng):
    model = random_model(2, 2, 2, rng, floor=1e-6)
    X = rng.normal(size=(6, 2))
    new = reestimate(model, accumulate_stats(model, X, WindowSpec(6)))
    ref = conventional_update(model, X)
    for name, value in ref.items():
        np.testing.assert_allclose(getattr(new, name), value, atol=1e-6, err_msg=name)


def test_baum_welch_recovers_a_known_mixture(rng):
    truth = Hmm([1.0], [[1.0]], [[0.4, 0.6]], [[[-3.0, 0.0, 2.0], [3.0, 1.0, -2.0]]],
                np.ones((1, 2, 3)), np.full(3, 1e-3))
    X = sample_hmm(truth, 20000, rng)
    init = kmeans_init([X[:2000]], 1, 2, seed=1)
    model = baum_welch_short(init, [X], WindowSpec(101, 10), iterations=20)
    found = model.means[0][np.argsort(model.means[0, :, 0])]
    assert np.max(np.abs(found - truth.means[0])) < 0.05


def test_baum_welch_likelihood_never_drops(rng):
    gens = [random_model(2, 2, 3, rng, spread=2.0) for _ in range(3)]
    corpus = [sample_hmm(g, 300, rng) for g in gens]
    model = kmeans_init(corpus, 2, 3, seed=0)
    trace = []
    out = baum_welch_short(model, corpus, WindowSpec(20, 2), iterations=8, trace=trace)
    out.validate()
    diffs = np.diff(trace)
    assert np.all(diffs >= -1e-8 * np.abs(np.array(trace[:-1])))
    assert np.all(out.variances >= out.var_floor)


def test_baum_welch_rejects_empty_corpus(rng):
    with pytest.raises(InsufficientDataError):
        baum_welch_short(random_model(1, 1, 2, rng), [], WindowSpec(3))


def test_merge_order_does_not_matter(rng):
    model = random_model(2, 2, 3, rng)
    blocks = {i: accumulate_stats(model, rng.normal(size=(30, 3)), WindowSpec(8))
              for i in range(6)}
    forward = merge_stats(blocks)
    backward = merge_stats(dict(reversed(list(blocks.items()))))
    np.testing.assert_array_equal(forward.first, backward.first)
    pairs = merge_stats({0: merge_stats({k: blocks[k] for k in (4, 5, 0)}),
                         1: merge_stats({k: blocks[k] for k in (1, 2, 3)})})
    np.testing.assert_allclose(pairs.first, forward.first, rtol=1e-9)
    np.testing.assert_allclose(pairs.second, forward.second, rtol=1e-9)


# ------------------------------------------------------------------ Viterbi

def test_viterbi_single_state_is_mean_density(rng):
    model = random_model(1, 3, 4, rng)
    X = rng.normal(size=(8, 4))
    score, path = viterbi_loglik(model, X)
    assert score == pytest.approx(gmm_logpdf(model, X).mean(), abs=1e-12)
    assert not np.any(path)


def test_viterbi_against_enumeration(rng):
    model = random_model(2, 2, 3, rng)
    X = rng.normal(size=(3, 3))
    paths = enumerate_paths(model, X)
    best = max(paths, key=paths.get)
    score, path = viterbi_loglik(model, X)
    assert score == pytest.approx(paths[best] / 3, abs=1e-12)
    assert tuple(path) == best


def test_duplicated_segment_with_absorbing_state(rng):
    base = random_model(2, 2, 3, rng)
    model = Hmm([0.7, 0.3], [[1.0, 0.0], [0.5, 0.5]], base.weights, base.means,
                base.variances, base.var_floor)
    X = base.means[0, 0] + 0.1 * rng.normal(size=(10, 3))
    s1, p1 = viterbi_loglik(model, X)
    s2, p2 = viterbi_loglik(model, np.vstack([X, X]))
    assert not np.any(p1) and not np.any(p2)
    assert abs(s2 - s1) <= abs(np.log(0.7)) / 10 + 1e-12


def prefix_oracle(model, X, n_w):
    """Window scores as the window-restricted cost of each prefix's best path."""
    b = model.state_loglik(X)
    la, lp = model.log_trans, model.log_pi
    out = []
    for s in range(len(X) - n_w + 1):
        t = s + n_w - 1
        _, path = viterbi_loglik(model, X[:t + 1])
        cost = sum(b[u, path[u]] + (lp[path[0]] if u == 0 else la[path[u - 1], path[u]])
                   for u in range(s, t + 1))
        out.append(cost / n_w)
    return np.array(out)


def test_sliding_scores_follow_prefix_best_paths(rng):
    model = random_model(3, 2, 3, rng, spread=1.5)
    X = rng.normal(size=(25, 3))
    got = sliding_viterbi(model, X, WindowSpec(6))
    np.testing.assert_allclose(got.scores, prefix_oracle(model, X, 6), atol=1e-10)
    np.testing.assert_array_equal(got.anchors, np.arange(20) + 3)


def test_sliding_single_state_equals_restart(rng):
    model = random_model(1, 4, 5, rng)
    X = rng.normal(size=(60, 5))
    spec = WindowSpec(11, 2)
    a = sliding_viterbi(model, X, spec)
    b = sliding_viterbi(model, X, spec, restart=True)
    np.testing.assert_allclose(a.scores, b.scores, atol=1e-10)


def test_symmetric_model_scores_shift_by_a_constant(rng):
    base = random_model(1, 3, 3, rng)
    J = 3
    sym = Hmm(np.full(J, 1 / J), np.full((J, J), 1 / J), np.repeat(base.weights, J, 0),
              np.repeat(base.means, J, 0), np.repeat(base.variances, J, 0), base.var_floor)
    X = rng.normal(size=(40, 3))
    spec = WindowSpec(9)
    # every window frame carries one log(1/J) term: the initial one or a transition
    np.testing.assert_allclose(sliding_viterbi(sym, X, spec).scores,
                               sliding_viterbi(base, X, spec).scores + np.log(1 / J),
                               atol=1e-10)


def test_operation_count_is_linear_in_length(rng):
    model = random_model(2, 3, 3, rng)
    spec = WindowSpec(10)
    a = sliding_viterbi(model, rng.normal(size=(50, 3)), spec)
    b = sliding_viterbi(model, rng.normal(size=(100, 3)), spec)
    assert a.ops == 50 * (4 + 6)
    assert b.ops == 2 * a.ops
    # restarting pays for every frame of every window: 41 windows x 10 frames
    restart = sliding_viterbi(model, rng.normal(size=(50, 3)), spec, restart=True)
    assert restart.ops == 41 * 10 * (4 + 6)


def test_sliding_needs_a_full_window(rng):
    with pytest.raises(InsufficientDataError):
        sliding_viterbi(random_model(1, 1, 2, rng), rng.normal(size=(3, 2)), WindowSpec(4))


@given(T=st.integers(1, 80), n_w=st.integers(1, 20), stride=st.integers(1, 7))
@settings(max_examples=60, deadline=None)
def test_score_count_formula(T, n_w, stride):
    if T < n_w:
        return
    model = random_model(2, 1, 2, np.random.default_rng(T))
    out = sliding_viterbi(model, np.zeros((T, 2)), WindowSpec(n_w, stride))
    assert len(out.scores) == (T - n_w) // stride + 1
    assert np.all(np.diff(out.anchors) > 0)


def test_sliding_is_repeatable(rng):
    model = random_model(3, 2, 3, rng)
    X = rng.normal(size=(40, 3))
    a = sliding_viterbi(model, X, WindowSpec(7))
    b = sliding_viterbi(model, X, WindowSpec(7))
    np.testing.assert_array_equal(a.scores, b.scores)


# -------------------------------------------------------------- persistence

def test_model_file_round_trip(tmp_path, rng):
    model = random_model(3, 2, 4, rng)
    model.metadata["note"] = "x"
    save_model(tmp_path / "m.json", model)
    back = load_model(tmp_path / "m.json")
    for name in ("pi", "trans", "weights", "means", "variances", "var_floor"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    assert dumps_model(back) == dumps_model(model)
    assert model_hash(back) == model_hash(model)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["n_states"] == 3 and doc["n_mix"] == 2 and doc["dim"] == 4


def test_model_file_errors(rng):
    doc = model_to_dict(random_model(1, 1, 2, rng))
    with pytest.raises(ModelFormatError):
        model_from_dict({**doc, "version": 99})
    with pytest.raises(ModelFormatError):
        model_from_dict({**doc, "format": "other"})
    with pytest.raises(ModelFormatError):
        model_from_dict({**doc, "pi": [0.5]})
