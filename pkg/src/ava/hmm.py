"""Ergodic HMMs with diagonal Gaussian-mixture states.

Training follows a window-matched scheme: every statistic is gathered from
fixed-length windows slid over each utterance, each window being scored in
isolation. Scoring at test time uses one Viterbi trellis per utterance that
is never reset; each window's score is read off the best path ending at the
window's last frame.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgumentError, InsufficientDataError, ModelFormatError, NumericalError
from .frontend import FeatureSequence, FrameConfig

MODEL_FORMAT = "ava-hmm"
MODEL_VERSION = 1
LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR_SCALE = 1e-3


def _frames(x) -> np.ndarray:
    if isinstance(x, FeatureSequence):
        return x.frames
    return np.asarray(x, dtype=np.float64)


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _lse(a, axis):
    """log-sum-exp that tolerates all -inf slices."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class WindowSpec:
    n_w: int = 101
    stride: int = 1

    def __post_init__(self):
        if self.n_w < 1 or self.stride < 1:
            raise ValueError(f"need n_w >= 1 and stride >= 1, got {self}")

    def starts(self, T: int) -> np.ndarray:
        if T < self.n_w:
            return np.zeros(0, dtype=int)
        return np.arange(0, T - self.n_w + 1, self.stride)

    def count(self, T: int) -> int:
        return 0 if T < self.n_w else (T - self.n_w) // self.stride + 1

    def duration(self, cfg: FrameConfig = FrameConfig()) -> float:
        """Signal span of one window in seconds."""
        return (self.n_w - 1) * cfg.frame_shift + cfg.frame_duration


@dataclass
class Hmm:
    """Ergodic HMM; probabilities are held in natural form.

    ``weights``, ``pi`` and ``trans`` are simplexes, ``means`` and
    ``variances`` have shape (J, K, D).
    """

    pi: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    var_floor: np.ndarray
    frame_config: FrameConfig = field(default_factory=FrameConfig)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.var_floor = np.asarray(self.var_floor, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def n_mix(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    @property
    def log_pi(self):
        return _safe_log(self.pi)

    @property
    def log_trans(self):
        return _safe_log(self.trans)

    @property
    def log_weights(self):
        return _safe_log(self.weights)

    def copy(self) -> "Hmm":
        return Hmm(self.pi.copy(), self.trans.copy(), self.weights.copy(),
                   self.means.copy(), self.variances.copy(), self.var_floor.copy(),
                   self.frame_config, dict(self.metadata))

    def validate(self, tol: float = 1e-9) -> None:
        J, K, D = self.means.shape
        shapes = {"pi": (self.pi, (J,)), "trans": (self.trans, (J, J)),
                  "weights": (self.weights, (J, K)),
                  "variances": (self.variances, (J, K, D)),
                  "var_floor": (self.var_floor, (D,))}
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        for name, arr in (("pi", self.pi), ("trans", self.trans),
                          ("weights", self.weights)):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has negative or non-finite entries")
            if np.any(np.abs(arr.sum(axis=-1) - 1.0) > tol):
                raise ValueError(f"{name} rows do not sum to 1")
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite means")
        if np.any(self.var_floor <= 0):
            raise ValueError("variance floor must be positive")
        if np.any(self.variances < self.var_floor):
            raise ValueError("variance below floor")

    # --------------------------------------------------------- emissions

    def component_loglik(self, X) -> np.ndarray:
        """log w_jk + log N(x_t | mu_jk, var_jk), shape (T, J, K)."""
        X = _frames(X)
        J, K, D = self.means.shape
        prec = (1.0 / self.variances).reshape(J * K, D)
        mu = self.means.reshape(J * K, D)
        quad = (X * X) @ prec.T - 2.0 * X @ (mu * prec).T + np.sum(mu * mu * prec, axis=1)
        const = -0.5 * (D * LOG_2PI + np.sum(np.log(self.variances), axis=2)).reshape(J * K)
        out = (const - 0.5 * quad).reshape(len(X), J, K)
        return out + self.log_weights[None]

    def state_loglik(self, X) -> np.ndarray:
        """Per-state log emission density, shape (T, J)."""
        return _lse(self.component_loglik(X), axis=2)


# ------------------------------------------------------------- k-means

def kmeans(X: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 50, tol: float = 1e-4):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centroid move falls below ``tol`` times the data
    scale. Empty clusters are re-seeded from the point farthest from its
    centroid.
    """
    n = len(X)
    if n < k:
        raise InsufficientDataError(f"{n} points cannot fill {k} clusters")
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[i] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[i]) ** 2, axis=1))
    scale = np.sqrt(np.mean(np.var(X, axis=0))) or 1.0
    x2 = np.sum(X * X, axis=1)
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = x2[:, None] - 2.0 * X @ centers.T + np.sum(centers ** 2, axis=1)
        labels = np.argmin(dist, axis=1)
        counts = np.bincount(labels, minlength=k)
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        for c in np.flatnonzero(counts == 0):
            resid = np.sum((X - centers[labels]) ** 2, axis=1)
            far = int(np.argmax(resid))
            new[c] = X[far]
            counts[c] = 1
            labels[far] = c
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        shift = np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < tol * scale:
            break
    dist = x2[:, None] - 2.0 * X @ centers.T + np.sum(centers ** 2, axis=1)
    return centers, np.argmin(dist, axis=1)


def kmeans_init(corpus: Sequence, J: int, K: int, seed: int = 0,
                frame_config: FrameConfig = FrameConfig()) -> Hmm:
    """Seed an ergodic J-state, K-mixture HMM from nested K-means clusters."""
    frames = [_frames(u) for u in corpus]
    if not frames:
        raise InsufficientDataError("empty corpus")
    X = np.vstack(frames)
    if len(X) < J * K:
        raise InsufficientDataError(f"{len(X)} frames < J*K = {J * K}")
    rng = np.random.default_rng(seed)
    D = X.shape[1]
    floor = VAR_FLOOR_SCALE * np.maximum(np.var(X, axis=0), 1e-12)
    _, state_of = kmeans(X, J, rng) if J > 1 else (None, np.zeros(len(X), dtype=int))
    weights = np.zeros((J, K))
    means = np.zeros((J, K, D))
    variances = np.zeros((J, K, D))
    for j in range(J):
        Xj = X[state_of == j]
        if len(Xj) < K:
            # borrow the nearest frames so every mixture gets data
            centre = Xj.mean(axis=0) if len(Xj) else X.mean(axis=0)
            order = np.argsort(np.sum((X - centre) ** 2, axis=1), kind="stable")
            Xj = X[order[:K]]
        if K > 1:
            _, sub = kmeans(Xj, K, rng)
        else:
            sub = np.zeros(len(Xj), dtype=int)
        for k in range(K):
            Xjk = Xj[sub == k]
            weights[j, k] = len(Xjk)
            means[j, k] = Xjk.mean(axis=0)
            variances[j, k] = np.maximum(Xjk.var(axis=0), floor)
    weights /= weights.sum(axis=1, keepdims=True)
    return Hmm(np.full(J, 1.0 / J), np.full((J, J), 1.0 / J), weights, means,
               variances, floor, frame_config)


# ----------------------------------------------------- forward-backward

def _forward_backward_batch(log_pi, log_a, log_b, want_xi=False):
    """Log-domain forward-backward over a batch of equal-length segments.

    ``log_b`` has shape (W, N, J). Returns posteriors (W, N, J), per-segment
    log-likelihoods (W,), and, if requested, the pairwise posteriors summed
    over segments and time (J, J).
    """
    W, N, J = log_b.shape
    if J == 1:
        post = np.ones((W, N, 1))
        xi = np.full((1, 1), float(W * (N - 1))) if want_xi else None
        return post, log_b[:, :, 0].sum(axis=1), xi
    alpha = np.empty((W, N, J))
    beta = np.zeros((W, N, J))
    alpha[:, 0] = log_pi + log_b[:, 0]
    for u in range(1, N):
        alpha[:, u] = _lse(alpha[:, u - 1, :, None] + log_a[None], axis=1) + log_b[:, u]
    for u in range(N - 2, -1, -1):
        beta[:, u] = _lse(log_a[None] + (log_b[:, u + 1] + beta[:, u + 1])[:, None, :], axis=2)
    ll = _lse(alpha[:, -1], axis=1)
    post = np.exp(alpha + beta - ll[:, None, None])
    xi = None
    if want_xi:
        xi = np.zeros((J, J))
        for u in range(N - 1):
            xi += np.exp(alpha[:, u, :, None] + log_a[None]
                         + (log_b[:, u + 1] + beta[:, u + 1])[:, None, :]
                         - ll[:, None, None]).sum(axis=0)
    return post, ll, xi


def forward_backward(model: Hmm, segment, log_b=None):
    """State posteriors P(s_t = j | segment) and log p(segment | model)."""
    if log_b is None:
        log_b = model.state_loglik(segment)
    if len(log_b) == 0:
        raise InsufficientDataError("empty segment")
    post, ll, _ = _forward_backward_batch(model.log_pi, model.log_trans, log_b[None])
    return post[0], float(ll[0])


@dataclass
class OccupancyStats:
    """Short-time occupancies for one utterance.

    ``gamma`` (T, J) averages the in-window posteriors of every window
    holding frame t; ``window_count`` (T,) is the number of such windows;
    ``mix_post`` (T, J, K) splits gamma across mixtures.
    """

    gamma: np.ndarray
    mix_post: np.ndarray
    window_count: np.ndarray
    init: np.ndarray
    xi: np.ndarray
    window_loglik: np.ndarray


def _training_starts(T: int, spec: WindowSpec) -> np.ndarray:
    starts = spec.starts(T)
    if starts[-1] != T - spec.n_w:
        # tail window so that decimated grids still cover every frame
        starts = np.append(starts, T - spec.n_w)
    return starts


def _occupancy(model: Hmm, X: np.ndarray, spec: WindowSpec, log_comp=None,
               want_xi=False) -> OccupancyStats:
    T = len(X)
    if T < spec.n_w:
        raise InsufficientDataError(f"utterance has {T} frames < N_w = {spec.n_w}")
    if spec.stride > spec.n_w:
        raise ArgumentError(f"stride {spec.stride} > N_w = {spec.n_w} leaves frames "
                            "outside every window")
    if log_comp is None:
        log_comp = model.component_loglik(X)
    log_b = _lse(log_comp, axis=2)
    resp = np.exp(log_comp - log_b[:, :, None])
    starts = _training_starts(T, spec)
    N = spec.n_w
    idx = starts[:, None] + np.arange(N)[None, :]
    post, ll, xi = _forward_backward_batch(model.log_pi, model.log_trans,
                                           log_b[idx], want_xi)
    J = model.n_states
    occ = np.zeros((T, J))
    count = np.zeros(T)
    for u in range(N):
        np.add.at(occ, starts + u, post[:, u])
        np.add.at(count, starts + u, 1.0)
    gamma = occ / count[:, None]
    return OccupancyStats(gamma, gamma[:, :, None] * resp, count,
                          post[:, 0].sum(axis=0), xi, ll)


def short_time_gamma(model: Hmm, utterance, spec: WindowSpec) -> OccupancyStats:
    return _occupancy(model, _frames(utterance), spec)


# ------------------------------------------------------------ Baum-Welch

@dataclass
class SufficientStats:
    """Window-summed statistics; blocks merge by addition."""

    zeroth: np.ndarray
    first: np.ndarray
    second: np.ndarray
    trans: np.ndarray
    init: np.ndarray
    loglik: float = 0.0
    n_windows: int = 0
    frames: int = 0

    @classmethod
    def zeros(cls, J, K, D):
        return cls(np.zeros((J, K)), np.zeros((J, K, D)), np.zeros((J, K, D)),
                   np.zeros((J, J)), np.zeros(J))

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(self.zeroth + other.zeroth, self.first + other.first,
                               self.second + other.second, self.trans + other.trans,
                               self.init + other.init, self.loglik + other.loglik,
                               self.n_windows + other.n_windows,
                               self.frames + other.frames)


def merge_stats(blocks: dict) -> SufficientStats:
    """Reduce per-utterance blocks in sorted-key order."""
    keys = sorted(blocks)
    total = blocks[keys[0]]
    for key in keys[1:]:
        total = total + blocks[key]
    return total


def accumulate_stats(model: Hmm, utterance, spec: WindowSpec) -> SufficientStats:
    """Sum of per-window sufficient statistics over one utterance.

    Frame t enters with weight ``window_count[t] * gamma[t]``, i.e. once for
    each window holding it, weighted by that window's own posterior.
    """
    X = _frames(utterance)
    occ = _occupancy(model, X, spec, want_xi=True)
    c = occ.mix_post * occ.window_count[:, None, None]
    return SufficientStats(
        zeroth=c.sum(axis=0),
        first=np.einsum("tjk,td->jkd", c, X),
        second=np.einsum("tjk,td->jkd", c, X * X),
        trans=occ.xi,
        init=occ.init,
        loglik=float(np.sum(occ.window_loglik / spec.n_w)),
        n_windows=len(occ.window_loglik),
        frames=len(X),
    )


def reestimate(model: Hmm, stats: SufficientStats, min_occupancy: float = 1e-10) -> Hmm:
    """ML update from accumulated statistics; idle mixtures keep their parameters."""
    new = model.copy()
    n = stats.zeroth
    ok = n > min_occupancy
    safe = np.where(ok, n, 1.0)[:, :, None]
    mu = stats.first / safe
    var = stats.second / safe - mu * mu
    new.means = np.where(ok[:, :, None], mu, model.means)
    new.variances = np.maximum(np.where(ok[:, :, None], var, model.variances),
                               model.var_floor)
    state_n = n.sum(axis=1)
    for j in range(model.n_states):
        if state_n[j] > min_occupancy:
            w = np.where(ok[j], n[j], 0.0)
            new.weights[j] = w / w.sum()
    row = stats.trans.sum(axis=1)
    for i in range(model.n_states):
        if row[i] > min_occupancy:
            new.trans[i] = stats.trans[i] / row[i]
    if stats.init.sum() > 0:
        new.pi = stats.init / stats.init.sum()
    return new


def baum_welch_short(model: Hmm, corpus: Sequence, spec: WindowSpec,
                     iterations: int = 10, trace: list | None = None) -> Hmm:
    """Re-estimate ``model`` from window-matched statistics.

    ``trace`` (if given) receives the mean per-frame window log-likelihood
    of the model entering each iteration, plus that of the returned model.
    """
    corpus = list(corpus)
    if not corpus:
        raise InsufficientDataError("empty corpus")
    usable = [u for u in corpus if len(_frames(u)) >= spec.n_w]
    if not usable:
        raise InsufficientDataError(f"no utterance reaches N_w = {spec.n_w} frames")
    total = sum(len(_frames(u)) for u in usable)
    J, K, D = model.means.shape
    if total < 10 * J * K:
        raise InsufficientDataError(f"{total} frames < 10*J*K = {10 * J * K}")

    def collect(m):
        blocks = {i: accumulate_stats(m, u, spec) for i, u in enumerate(usable)}
        return merge_stats(blocks)

    stats = collect(model)
    for it in range(iterations):
        if trace is not None:
            trace.append(stats.loglik / stats.n_windows)
        for arr in (stats.zeroth, stats.first, stats.second, stats.trans):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite statistic at iteration {it}")
        model = reestimate(model, stats)
        stats = collect(model)
    if trace is not None:
        trace.append(stats.loglik / stats.n_windows)
    return model


# ----------------------------------------------------------------- Viterbi

def viterbi_loglik(model: Hmm, segment, log_b=None):
    """Frame-normalized best-path log-likelihood and the best path."""
    if log_b is None:
        log_b = model.state_loglik(segment)
    T, J = log_b.shape
    if T == 0:
        raise InsufficientDataError("empty segment")
    log_a = model.log_trans
    delta = model.log_pi + log_b[0]
    back = np.zeros((T, J), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + log_a
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(J)] + log_b[t]
    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return float(delta[path[-1]] / T), path


@dataclass
class SlidingScores:
    """Per-window normalized log-likelihoods from one utterance."""

    starts: np.ndarray
    anchors: np.ndarray
    scores: np.ndarray
    n_w: int
    ops: int = 0
    paths: np.ndarray | None = None
    trans_terms: np.ndarray | None = None


def sliding_viterbi(model: Hmm, utterance, spec: WindowSpec, restart: bool = False,
                    return_paths: bool = False, log_b=None) -> SlidingScores:
    """Score every window on the stride grid from one growing trellis.

    A window ending at frame t gets the cost, restricted to its own frames,
    of the globally best path ending at t: the emission terms plus the
    transition into each window frame (the initial log-probability for a
    window starting at frame 0), divided by N_w. ``ops`` counts trellis
    work as T * (J*J + J*K).

    ``restart=True`` instead runs an independent Viterbi per window.
    """
    if log_b is None:
        log_b = model.state_loglik(utterance)
    T, J = log_b.shape
    N = spec.n_w
    if T < N:
        raise InsufficientDataError(f"utterance has {T} frames < N_w = {N}")
    starts = spec.starts(T)
    anchors = starts + N // 2
    W = len(starts)
    paths = np.zeros((W, N), dtype=int) if return_paths else None

    if restart:
        scores = np.empty(W)
        for i, s in enumerate(starts):
            scores[i], p = viterbi_loglik(model, None, log_b=log_b[s:s + N])
            if return_paths:
                paths[i] = p
        out = SlidingScores(starts, anchors, scores, N, W * N * (J * J + J * model.n_mix), paths)
        if return_paths:
            out.trans_terms = scores * N - log_b[starts[:, None] + np.arange(N), paths].sum(axis=1)
        return out

    ops = T * (J * J + J * model.n_mix)
    if J == 1:
        terms = log_b[:, 0] + model.log_trans[0, 0]
        terms[0] = log_b[0, 0] + model.log_pi[0]
        cs = np.concatenate([[0.0], np.cumsum(terms)])
        scores = (cs[starts + N] - cs[starts]) / N
    else:
        log_a = model.log_trans
        L = N + 1
        deltas = np.empty((T, J))
        hist = np.zeros((J, L), dtype=int)
        hist[:, 0] = np.arange(J)
        deltas[0] = model.log_pi + log_b[0]
        scores = np.empty(W)
        ends = dict(zip((starts + N - 1).tolist(), range(W)))
        cols = np.arange(J)
        for t in range(T):
            if t > 0:
                cand = deltas[t - 1][:, None] + log_a
                bp = np.argmax(cand, axis=0)
                deltas[t] = cand[bp, cols] + log_b[t]
                hist = hist[bp]
                hist[:, t % L] = cols
            i = ends.get(t)
            if i is None:
                continue
            s = t - N + 1
            best = int(np.argmax(deltas[t]))
            if s == 0:
                scores[i] = deltas[t, best] / N
            else:
                anc = hist[best, (s - 1) % L]
                scores[i] = (deltas[t, best] - deltas[s - 1, anc]) / N
            if return_paths:
                paths[i] = hist[best, (s + np.arange(N)) % L]
    out = SlidingScores(starts, anchors, scores, N, ops, paths)
    if return_paths:
        out.trans_terms = scores * N - log_b[starts[:, None] + np.arange(N), paths].sum(axis=1)
    return out


# ------------------------------------------------------------ persistence

def model_to_dict(model: Hmm) -> dict:
    cfg = model.frame_config
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "n_states": model.n_states,
        "n_mix": model.n_mix,
        "dim": model.dim,
        "frame_config": {"frame_duration": cfg.frame_duration,
                         "frame_shift": cfg.frame_shift},
        "pi": model.pi.tolist(),
        "transitions": model.trans.tolist(),
        "var_floor": model.var_floor.tolist(),
        "states": [{"weights": model.weights[j].tolist(),
                    "means": model.means[j].tolist(),
                    "variances": model.variances[j].tolist()}
                   for j in range(model.n_states)],
        "metadata": model.metadata,
    }


def model_from_dict(doc: dict) -> Hmm:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"not an {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')}")
    states = doc["states"]
    model = Hmm(
        pi=doc["pi"],
        trans=doc["transitions"],
        weights=[s["weights"] for s in states],
        means=[s["means"] for s in states],
        variances=[s["variances"] for s in states],
        var_floor=doc["var_floor"],
        frame_config=FrameConfig(**doc["frame_config"]),
        metadata=doc.get("metadata", {}),
    )
    if (model.n_states, model.n_mix, model.dim) != (doc["n_states"], doc["n_mix"], doc["dim"]):
        raise ModelFormatError("header disagrees with parameter arrays")
    try:
        model.validate()
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc
    return model


def dumps_model(model: Hmm) -> str:
    # float repr is the shortest string that round-trips exactly
    return json.dumps(model_to_dict(model), indent=1)


def save_model(path, model: Hmm) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> Hmm:
    return model_from_dict(json.loads(Path(path).read_text()))


def model_hash(model: Hmm) -> str:
    doc = model_to_dict(model)
    doc["metadata"] = {}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
