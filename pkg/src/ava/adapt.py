"""MAP adaptation of a speaker-independent HMM to enrollment speech."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, NumericalError
from .hmm import Hmm, WindowSpec, _frames, model_hash, short_time_gamma


@dataclass(frozen=True)
class MapConfig:
    """Prior weights (relevance factors) for weights, means and variances."""

    eta_w: float = 16.0
    eta_m: float = 16.0
    eta_v: float = 16.0
    iterations: int = 3

    def __post_init__(self):
        if min(self.eta_w, self.eta_m, self.eta_v) <= 0:
            raise ValueError("MAP prior weights must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one MAP iteration")


def map_statistics(model: Hmm, enrollment: Sequence, spec: WindowSpec):
    """Occupancy n_jk and raw first/second moment sums under short-time gamma."""
    J, K, D = model.means.shape
    n = np.zeros((J, K))
    s1 = np.zeros((J, K, D))
    s2 = np.zeros((J, K, D))
    for utt in enrollment:
        X = _frames(utt)
        g = short_time_gamma(model, X, spec).mix_post
        n += g.sum(axis=0)
        s1 += np.einsum("tjk,td->jkd", g, X)
        s2 += np.einsum("tjk,td->jkd", g, X * X)
    return n, s1, s2


def map_update(prior: Hmm, n, s1, s2, cfg: MapConfig) -> Hmm:
    """One MAP step from accumulated statistics; mixtures with n = 0 keep the prior."""
    new = prior.copy()
    seen = n > 0
    safe = np.where(seen, n, 1.0)[:, :, None]
    ex = s1 / safe
    exx = s2 / safe
    a_w = n / (n + cfg.eta_w)
    a_m = (n / (n + cfg.eta_m))[:, :, None]
    a_v = (n / (n + cfg.eta_v))[:, :, None]
    mu = a_m * ex + (1.0 - a_m) * prior.means
    var = a_v * exx + (1.0 - a_v) * (prior.variances + prior.means ** 2) - mu ** 2
    new.means = np.where(seen[:, :, None], mu, prior.means)
    new.variances = np.where(seen[:, :, None],
                             np.maximum(var, prior.var_floor), prior.variances)
    # per-state accumulated window weight normalizes the occupancy fraction
    n_state = n.sum(axis=1)
    for j in range(prior.n_states):
        if n_state[j] > 0:
            w = a_w[j] * n[j] / n_state[j] + (1.0 - a_w[j]) * prior.weights[j]
            new.weights[j] = w / w.sum()
    if not (np.all(np.isfinite(new.means)) and np.all(np.isfinite(new.variances))):
        raise NumericalError("non-finite MAP moment")
    return new


def map_adapt(si: Hmm, enrollment: Sequence, spec: WindowSpec,
              cfg: MapConfig = MapConfig()) -> Hmm:
    """Speaker-adapted copy of ``si``; transitions and initial probabilities are kept.

    Each iteration recomputes occupancies with the current adapted model
    while the prior stays the SI model.
    """
    enrollment = list(enrollment)
    if not enrollment:
        raise InsufficientDataError("no enrollment data")
    for utt in enrollment:
        if len(_frames(utt)) < spec.n_w:
            raise InsufficientDataError(
                f"enrollment utterance of {len(_frames(utt))} frames < N_w = {spec.n_w}")
    current = si
    for _ in range(cfg.iterations):
        n, s1, s2 = map_statistics(current, enrollment, spec)
        current = map_update(si, n, s1, s2, cfg)
    current.metadata = {"kind": "map", "si_hash": model_hash(si), "map_config": asdict(cfg)}
    return current
