"""Cohort selection and minimum-verification-error training by GPD.

Training tokens are N_w-frame windows. A target token should score higher
under the target model than under the anti-target model, an impostor token
the reverse. Each token's misverification measure goes through a sigmoid,
and the summed losses are minimized by online gradient descent on the
emission parameters of both models.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArgumentError, ModelFormatError, NumericalError
from .hmm import LOG_2PI, Hmm, WindowSpec, model_from_dict, model_to_dict, sliding_viterbi

PAIR_FORMAT = "ava-pair"
PAIR_VERSION = 1
TRACE_COLUMNS = ("epoch", "loss", "empirical_wmde", "empirical_wfae", "step_size")


class DivergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class WindowToken:
    utt_id: str
    start: int
    n_w: int
    is_target: bool


@dataclass(frozen=True)
class MveConfig:
    a0: float = 1.0
    a1: float = 1.0
    slope: float = 1.0
    step: float = 0.01
    epochs: int = 10
    batch_size: int = 1
    update_transitions: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.a0 <= 0 or self.a1 <= 0 or self.slope <= 0:
            raise ValueError("loss weights and sigmoid slope must be positive")
        if self.step < 0:
            raise ValueError("step size must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SpeakerModelPair:
    target: Hmm
    anti_target: Hmm
    threshold: float = 0.0
    metadata: dict = field(default_factory=dict)

    def validate(self):
        self.target.validate()
        self.anti_target.validate()
        if self.target.dim != self.anti_target.dim:
            raise ValueError("target and anti-target feature dimensions differ")

    def copy(self) -> "SpeakerModelPair":
        return SpeakerModelPair(self.target.copy(), self.anti_target.copy(),
                                self.threshold, dict(self.metadata))


def make_tokens(utterances: Mapping[str, np.ndarray], spec: WindowSpec,
                is_target: bool, speech: Mapping[str, np.ndarray] | None = None
                ) -> list[WindowToken]:
    """Windows on the stride grid; with ``speech`` masks, silent anchors are skipped."""
    tokens = []
    for uid in sorted(utterances):
        for s in spec.starts(len(utterances[uid])):
            if speech is not None and not speech[uid][s + spec.n_w // 2]:
                continue
            tokens.append(WindowToken(uid, int(s), spec.n_w, is_target))
    return tokens


# ---------------------------------------------------------------- scoring

@dataclass
class TokenScores:
    g0: np.ndarray
    g1: np.ndarray
    path0: np.ndarray | None = None
    path1: np.ndarray | None = None
    trans0: np.ndarray | None = None
    trans1: np.ndarray | None = None

    @property
    def llr(self):
        return self.g0 - self.g1


def score_tokens(pair: SpeakerModelPair, tokens: Sequence[WindowToken],
                 utterances: Mapping[str, np.ndarray], paths: bool = False) -> TokenScores:
    """Growing-trellis window scores of each token under both models."""
    n = len(tokens)
    g = np.zeros((2, n))
    p = [None, None]
    tt = [None, None]
    if paths and n:
        p = [np.zeros((n, tokens[0].n_w), dtype=int) for _ in range(2)]
        tt = [np.zeros(n), np.zeros(n)]
    by_utt: dict = {}
    for i, tok in enumerate(tokens):
        by_utt.setdefault((tok.utt_id, tok.n_w), []).append(i)
    for (uid, n_w), idx in sorted(by_utt.items()):
        X = utterances[uid]
        for m, model in enumerate((pair.target, pair.anti_target)):
            res = sliding_viterbi(model, X, WindowSpec(n_w, 1), return_paths=paths)
            starts = np.array([tokens[i].start for i in idx])
            g[m, idx] = res.scores[starts]
            if paths:
                p[m][idx] = res.paths[starts]
                tt[m][idx] = res.trans_terms[starts]
    return TokenScores(g[0], g[1], p[0], p[1], tt[0], tt[1])


def token_llr(pair, tokens, utterances) -> np.ndarray:
    return score_tokens(pair, tokens, utterances).llr


def cohort_select(pair: SpeakerModelPair, impostor_windows: Sequence[WindowToken],
                  utterances: Mapping[str, np.ndarray], r: int | None = None,
                  n_target: int | None = None) -> list[WindowToken]:
    """The ``r`` impostor windows with the highest LLR, best first.

    ``r`` defaults to ``n_target``, the number of target tokens.
    """
    if r is None:
        if n_target is None:
            raise ArgumentError("give r or the target token count")
        r = n_target
    if r < 0 or r > len(impostor_windows):
        raise ArgumentError(f"cohort size {r} outside 0..{len(impostor_windows)}")
    llr = token_llr(pair, impostor_windows, utterances)
    order = np.argsort(-llr, kind="stable")[:r]
    return [impostor_windows[i] for i in order]


# ------------------------------------------------------------------- loss

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def misverification(g0, g1, is_target):
    """d_0 = g1 - g0 for target tokens, d_1 = g0 - g1 for impostor tokens."""
    return np.where(is_target, np.asarray(g1) - np.asarray(g0),
                    np.asarray(g0) - np.asarray(g1))


def smooth_loss(d_target, d_impostor, cfg: MveConfig = MveConfig()) -> float:
    d_target = np.asarray(d_target, dtype=float)
    d_impostor = np.asarray(d_impostor, dtype=float)
    return float(cfg.a0 * np.sum(sigmoid(cfg.slope * d_target))
                 + cfg.a1 * np.sum(sigmoid(cfg.slope * d_impostor)))


def mve_loss(pair, targets, cohort, utterances, cfg: MveConfig = MveConfig()) -> float:
    st = score_tokens(pair, targets, utterances)
    sc = score_tokens(pair, cohort, utterances)
    return smooth_loss(st.g1 - st.g0, sc.g0 - sc.g1, cfg)


# --------------------------------------------------------------- gradients

class _Params:
    """Transformed emission parameters: means, log-variances, weight logits."""

    def __init__(self, model: Hmm):
        self.means = model.means.copy()
        self.logvar = np.log(model.variances)
        self.logits = np.log(model.weights)
        self.floor = model.var_floor
        self.log_floor = np.log(model.var_floor)

    def variances(self):
        return np.exp(self.logvar)

    def log_weights(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def step(self, grads, eps):
        gm, gv, gz = grads
        self.means -= eps * gm
        self.logvar = np.maximum(self.logvar - eps * gv, self.log_floor)
        self.logits = self.logits - eps * gz
        self.logits = self.log_weights()

    def write(self, model: Hmm) -> Hmm:
        out = model.copy()
        out.means = self.means.copy()
        out.variances = np.maximum(np.exp(self.logvar), self.floor)
        w = np.exp(self.log_weights())
        out.weights = w / w.sum(axis=1, keepdims=True)
        return out


def aligned_score(params: _Params, X, path, trans_term, grad=False):
    """Frame-normalized log-likelihood of X along a fixed state path.

    With ``grad`` also returns d/d(means, log-variances, logits).
    """
    N, D = X.shape
    var = params.variances()
    logw = params.log_weights()
    total = float(trans_term)
    if grad:
        gm = np.zeros_like(params.means)
        gv = np.zeros_like(params.logvar)
        gz = np.zeros_like(params.logits)
    for j in np.unique(path):
        Xj = X[path == j]
        mu, prec = params.means[j], 1.0 / var[j]
        xp = Xj @ (mu * prec).T
        quad = (Xj * Xj) @ prec.T - 2.0 * xp + np.sum(mu * mu * prec, axis=1)
        comp = logw[j] - 0.5 * (D * LOG_2PI + np.log(var[j]).sum(axis=1) + quad)
        m = comp.max(axis=1, keepdims=True)
        lb = np.log(np.exp(comp - m).sum(axis=1)) + m[:, 0]
        total += lb.sum()
        if grad:
            r = np.exp(comp - lb[:, None])
            n = r.sum(axis=0)
            s1 = r.T @ Xj
            s2 = r.T @ (Xj * Xj)
            gm[j] = (s1 - n[:, None] * mu) * prec
            gv[j] = 0.5 * ((s2 - 2.0 * mu * s1 + n[:, None] * mu * mu) * prec - n[:, None])
            gz[j] = n - len(Xj) * np.exp(logw[j])
    g = total / N
    if not grad:
        return g
    return g, (gm / N, gv / N, gz / N)


def token_loss_grad(p0: _Params, p1: _Params, X, path0, tt0, path1, tt1,
                    is_target: bool, cfg: MveConfig):
    """Loss of one token and its gradients with respect to both models."""
    g0, grad0 = aligned_score(p0, X, path0, tt0, grad=True)
    g1, grad1 = aligned_score(p1, X, path1, tt1, grad=True)
    if is_target:
        d, a, sign0 = g1 - g0, cfg.a0, -1.0
    else:
        d, a, sign0 = g0 - g1, cfg.a1, 1.0
    s = float(sigmoid(cfg.slope * d))
    dl_dd = a * cfg.slope * s * (1.0 - s)
    c0, c1 = sign0 * dl_dd, -sign0 * dl_dd
    return a * s, tuple(c0 * x for x in grad0), tuple(c1 * x for x in grad1)


# -------------------------------------------------------------------- GPD

def gpd_train(pair: SpeakerModelPair, targets: Sequence[WindowToken],
              cohort: Sequence[WindowToken], utterances: Mapping[str, np.ndarray],
              cfg: MveConfig = MveConfig()):
    """Minimize the smoothed window error count by generalized probabilistic descent.

    Alignments are refreshed from the growing trellis at the start of each
    epoch and held fixed within it. Transitions and initial probabilities
    stay frozen. Returns the trained pair and the per-epoch trace (row
    ``e`` describes the pair entering epoch ``e``; the last row the result).
    """
    tokens = list(targets) + list(cohort)
    if not targets or not cohort:
        raise ArgumentError("MVE training needs target and cohort tokens")
    if cfg.update_transitions:
        raise NotImplementedError("transition updates are not supported by GPD here")
    rng = np.random.default_rng(cfg.seed)
    n_tok = len(tokens)
    labels = np.array([t.is_target for t in tokens])
    n_batches = -(-n_tok // cfg.batch_size)
    n_total = cfg.epochs * n_batches
    scale = 1.0
    update = 0
    current = pair.copy()
    trace = []
    prev_loss = None

    for epoch in range(cfg.epochs + 1):
        sc = score_tokens(current, tokens, utterances, paths=True)
        d = misverification(sc.g0, sc.g1, labels)
        loss = smooth_loss(d[labels], d[~labels], cfg)
        wmde = float(np.mean(sc.llr[labels] < 0.0))
        wfae = float(np.mean(sc.llr[~labels] >= 0.0))
        step_now = cfg.step * scale * (1.0 - min(update, n_total) / n_total) if n_total else 0.0
        trace.append({"epoch": epoch, "loss": loss, "empirical_wmde": wmde,
                      "empirical_wfae": wfae, "step_size": step_now})
        if prev_loss is not None and loss > 1.2 * prev_loss:
            warnings.warn(f"MVE loss rose from {prev_loss:.6g} to {loss:.6g} in epoch "
                          f"{epoch - 1}; halving the step", DivergenceWarning)
            scale *= 0.5
        prev_loss = loss
        if epoch == cfg.epochs or cfg.step == 0.0:
            if cfg.step == 0.0:
                trace.extend({**trace[-1], "epoch": e}
                             for e in range(epoch + 1, cfg.epochs + 1))
            break
        p0, p1 = _Params(current.target), _Params(current.anti_target)
        order = rng.permutation(n_tok)
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            acc0 = acc1 = None
            for i in batch:
                tok = tokens[i]
                X = utterances[tok.utt_id][tok.start:tok.start + tok.n_w]
                _, g0, g1 = token_loss_grad(p0, p1, X, sc.path0[i], sc.trans0[i],
                                            sc.path1[i], sc.trans1[i], tok.is_target, cfg)
                if not all(np.all(np.isfinite(x)) for x in g0 + g1):
                    raise NumericalError(
                        f"non-finite gradient on token {tok.utt_id}@{tok.start}")
                acc0 = g0 if acc0 is None else tuple(a + x for a, x in zip(acc0, g0))
                acc1 = g1 if acc1 is None else tuple(a + x for a, x in zip(acc1, g1))
            eps = cfg.step * scale * (1.0 - update / n_total)
            p0.step(acc0, eps)
            p1.step(acc1, eps)
            update += 1
        current = SpeakerModelPair(p0.write(current.target), p1.write(current.anti_target),
                                   current.threshold, current.metadata)
        current.validate()
    return current, trace


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ------------------------------------------------------------ persistence

def pair_to_dict(pair: SpeakerModelPair) -> dict:
    return {"format": PAIR_FORMAT, "version": PAIR_VERSION,
            "threshold": pair.threshold,
            "target": model_to_dict(pair.target),
            "anti_target": model_to_dict(pair.anti_target),
            "metadata": pair.metadata}


def save_pair(path, pair: SpeakerModelPair) -> None:
    Path(path).write_text(json.dumps(pair_to_dict(pair), indent=1))


def load_pair(path) -> SpeakerModelPair:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PAIR_FORMAT or doc.get("version") != PAIR_VERSION:
        raise ModelFormatError(f"{path}: not an {PAIR_FORMAT} v{PAIR_VERSION} document")
    pair = SpeakerModelPair(model_from_dict(doc["target"]),
                            model_from_dict(doc["anti_target"]),
                            float(doc["threshold"]), doc.get("metadata", {}))
    pair.validate()
    return pair
