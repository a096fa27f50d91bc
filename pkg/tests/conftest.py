import itertools

import numpy as np
import pytest

from ava.hmm import Hmm, WindowSpec, sliding_viterbi
from ava.mve import MveConfig, SpeakerModelPair, _Params, aligned_score, token_loss_grad


def random_model(J, K, D, rng, spread=1.0, floor=1e-3):
    """A random valid HMM with positive parameters everywhere."""
    pi = rng.dirichlet(np.ones(J))
    trans = rng.dirichlet(np.ones(J), size=J)
    weights = rng.dirichlet(np.ones(K), size=J)
    means = spread * rng.normal(size=(J, K, D))
    variances = rng.uniform(0.5, 2.0, size=(J, K, D))
    return Hmm(pi, trans, weights, means, variances, np.full(D, floor))


def gmm_logpdf(model, X):
    """Per-frame, per-state mixture log-density computed naively."""
    X = np.asarray(X, dtype=float)
    T, J = len(X), model.n_states
    out = np.empty((T, J))
    for t in range(T):
        for j in range(J):
            dens = 0.0
            for k in range(model.n_mix):
                m, v = model.means[j, k], model.variances[j, k]
                q = np.sum((X[t] - m) ** 2 / v) + np.sum(np.log(2 * np.pi * v))
                dens += model.weights[j, k] * np.exp(-0.5 * q)
            out[t, j] = np.log(dens)
    return out


def enumerate_paths(model, X):
    """Joint log-probability of every state path, keyed by path."""
    b = gmm_logpdf(model, X)
    T, J = b.shape
    lp = np.log(model.pi)
    la = np.log(model.trans)
    paths = {}
    for path in itertools.product(range(J), repeat=T):
        s = lp[path[0]] + b[0, path[0]]
        for t in range(1, T):
            s += la[path[t - 1], path[t]] + b[t, path[t]]
        paths[path] = s
    return paths


def brute_posteriors(model, X):
    """State posteriors and total log-likelihood by summing all paths."""
    paths = enumerate_paths(model, X)
    keys = list(paths)
    vals = np.array([paths[k] for k in keys])
    total = np.logaddexp.reduce(vals)
    T, J = len(X), model.n_states
    gamma = np.zeros((T, J))
    for k, v in zip(keys, vals):
        w = np.exp(v - total)
        for t, j in enumerate(k):
            gamma[t, j] += w
    return gamma, total


def random_pair(rng, J=1, K=2, D=3):
    return SpeakerModelPair(random_model(J, K, D, rng), random_model(J, K, D, rng))


def fd_check(rng, J, K, D, n_w, is_target, h=1e-5):
    pair = random_pair(rng, J, K, D)
    X = rng.normal(size=(n_w + 7, D))
    spec = WindowSpec(n_w)
    s0 = sliding_viterbi(pair.target, X, spec, return_paths=True)
    s1 = sliding_viterbi(pair.anti_target, X, spec, return_paths=True)
    i = int(rng.integers(len(s0.scores)))
    W = X[i:i + n_w]
    p0, p1 = _Params(pair.target), _Params(pair.anti_target)
    cfg = MveConfig()
    args = (W, s0.paths[i], s0.trans_terms[i], s1.paths[i], s1.trans_terms[i], is_target, cfg)
    # the fixed-alignment score reproduces the trellis score
    assert aligned_score(p0, W, s0.paths[i], s0.trans_terms[i]) == pytest.approx(
        s0.scores[i], abs=1e-10)
    _, g0, g1 = token_loss_grad(p0, p1, *args)
    worst = 0.0
    for params, grads in ((p0, g0), (p1, g1)):
        for name, g in zip(("means", "logvar", "logits"), grads):
            arr = getattr(params, name)
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = token_loss_grad(p0, p1, *args)[0]
                arr[idx] = old - h
                down = token_loss_grad(p0, p1, *args)[0]
                arr[idx] = old
                fd[idx] = (up - down) / (2 * h)
            scale = np.max(np.abs(fd))
            if scale > 1e-8:
                worst = max(worst, np.max(np.abs(g - fd)) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria outcomes, printed once at the end of the run.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}  [{detail}]")
