"""Window-level error metrics, utterance voting, K-fold splits and synthetic corpora."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, NoDecisionError, UndefinedMetricError
from .frontend import FEATURE_DIM, FeatureSequence, save_features_npy
from .hmm import Hmm
from .stream import ACCEPT, ABSTAIN, ScoreStream

TRUE_SPEAKER, IMPOSTOR = "true speaker", "impostor"
# speech log mel energy spread (nepers), roughly 11 dB
SPEECH_ENERGY_SD = 2.5


@dataclass(frozen=True)
class Trial:
    score: float
    is_target: bool
    vad_speech: bool = True


@dataclass
class EvalReport:
    thresholds: np.ndarray
    wmde: np.ndarray
    wfae: np.ndarray
    weer: float
    weer_threshold: float
    n_target: int
    n_impostor: int
    n_abstained: int
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"weer": self.weer, "threshold": self.weer_threshold,
                "n_target": self.n_target, "n_impostor": self.n_impostor,
                "n_abstained": self.n_abstained, **self.extra}

    def write(self, csv_path, json_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "wmde", "wfae"])
            for row in zip(self.thresholds, self.wmde, self.wfae):
                w.writerow([repr(float(v)) for v in row])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True))


def _as_arrays(trials):
    trials = list(trials)
    return (np.array([t.score for t in trials], dtype=float),
            np.array([t.is_target for t in trials], dtype=bool),
            np.array([t.vad_speech for t in trials], dtype=bool))


def weer(scores, is_target=None, speech=None) -> EvalReport:
    """Window equal error rate (in percent) from per-window scores.

    Accepts either a sequence of :class:`Trial` or parallel arrays. Trials
    whose anchor frame is silent are dropped. The sweep visits every distinct
    score; at threshold theta a target scoring below theta is a miss and an
    impostor scoring above it a false alarm. Where targets and impostors tie
    at theta, each tied trial counts as half an error. The equal-error point is
    linearly interpolated between the two sweep points bracketing the
    crossing.
    """
    if is_target is None:
        scores, is_target, speech = _as_arrays(scores)
    scores = np.asarray(scores, dtype=float)
    is_target = np.asarray(is_target, dtype=bool)
    speech = np.ones(len(scores), bool) if speech is None else np.asarray(speech, bool)
    if not np.all(np.isfinite(scores)):
        raise ValueError("trial scores must be finite")
    tgt = np.sort(scores[speech & is_target])
    imp = np.sort(scores[speech & ~is_target])
    if len(tgt) == 0 or len(imp) == 0:
        raise UndefinedMetricError("need at least one target and one impostor speech trial")
    theta = np.unique(np.concatenate([tgt, imp]))
    t_lo, t_hi = np.searchsorted(tgt, theta, "left"), np.searchsorted(tgt, theta, "right")
    i_lo, i_hi = np.searchsorted(imp, theta, "left"), np.searchsorted(imp, theta, "right")
    # a target and an impostor tied at theta cannot be separated: half an error each
    split = 0.5 * ((t_hi > t_lo) & (i_hi > i_lo))
    wmde = (t_lo + split * (t_hi - t_lo)) / len(tgt)
    wfae = (len(imp) - i_hi + split * (i_hi - i_lo)) / len(imp)
    diff = wmde - wfae
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        rate, thr = wmde[k], theta[k]
    else:
        frac = -diff[k - 1] / (diff[k] - diff[k - 1])
        rate = wmde[k - 1] + frac * (wmde[k] - wmde[k - 1])
        thr = theta[k - 1] + frac * (theta[k] - theta[k - 1])
    return EvalReport(theta, wmde, wfae, 100.0 * float(rate), float(thr),
                      len(tgt), len(imp), int(np.sum(~speech)))


def read_trials_csv(path) -> list[Trial]:
    """Trial file with columns ``llr`` (or ``score``), ``truth`` and optional ``vad``."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            score = float(row.get("llr", row.get("score")))
            truth = row["truth"].strip().lower() in ("1", "target", "true")
            vad = row.get("vad", "1").strip() in ("1", "true", "True")
            out.append(Trial(score, truth, vad))
    return out


@dataclass
class VoteResult:
    decision: str
    accepts: int
    decided: int
    correct: bool | None = None


def utterance_vote(decisions, truth_is_target: bool | None = None) -> VoteResult:
    """Majority vote over non-abstained window decisions; ties go to impostor."""
    if isinstance(decisions, ScoreStream):
        decisions = decisions.decisions
    decided = [d for d in decisions if d != ABSTAIN]
    if not decided:
        raise NoDecisionError("every window abstained")
    accepts = sum(d == ACCEPT for d in decided)
    label = TRUE_SPEAKER if 2 * accepts > len(decided) else IMPOSTOR
    correct = None if truth_is_target is None else (label == TRUE_SPEAKER) == truth_is_target
    return VoteResult(label, accepts, len(decided), correct)


def kfold_split(entries: Iterable, K: int, seed: int = 0):
    """Per-speaker K-fold partitions.

    ``entries`` yields objects with ``uid`` and ``speaker`` attributes or
    ``(uid, speaker)`` pairs. Returns K ``(enroll_ids, test_ids)`` tuples.
    """
    by_spk: dict = {}
    for e in entries:
        uid, spk = (e.uid, e.speaker) if hasattr(e, "uid") else e
        by_spk.setdefault(spk, []).append(uid)
    rng = np.random.default_rng(seed)
    subsets = [[] for _ in range(K)]
    for spk in sorted(by_spk):
        ids = sorted(by_spk[spk])
        if len(ids) < K:
            raise ArgumentError(f"speaker {spk!r} has {len(ids)} utterances, fewer than K={K}")
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        for i, part in enumerate(np.array_split(np.arange(len(ids)), K)):
            subsets[i].extend(shuffled[j] for j in part)
    folds = []
    for i in range(K):
        test = sorted(subsets[i])
        enroll = sorted(u for j in range(K) if j != i for u in subsets[j])
        folds.append((enroll, test))
    return folds


def confidence_range(values: Sequence[float]):
    """Mean and 95% half-width 1.96 * s / sqrt(n) (normal approximation)."""
    v = np.asarray(values, dtype=float)
    half = 1.96 * v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return float(v.mean()), float(half)


# ------------------------------------------------------- synthetic corpus

@dataclass
class SynthCorpus:
    root: Path
    manifest: Path
    generators: dict
    streams: list


def _speaker_offsets(n, dim, distance, rng):
    if n <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, n)))
        dirs = q.T
    else:
        dirs = rng.normal(size=(n, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # orthonormal directions of length d/sqrt(2) are pairwise d apart
    return dirs * distance / np.sqrt(2.0)


def _generator(centres, weights, offset, J) -> Hmm:
    trans = np.full((J, J), 0.1 / max(J - 1, 1)) if J > 1 else np.ones((1, 1))
    if J > 1:
        np.fill_diagonal(trans, 0.9)
    means = centres + offset
    return Hmm(np.full(J, 1.0 / J), trans, weights, means,
               np.ones_like(means), np.full(means.shape[2], 1e-3))


def sample_hmm(model: Hmm, n: int, rng) -> np.ndarray:
    J, K, D = model.means.shape
    states = np.empty(n, dtype=int)
    states[0] = rng.choice(J, p=model.pi)
    for t in range(1, n):
        states[t] = rng.choice(J, p=model.trans[states[t - 1]])
    u = rng.random(n)
    cum = np.cumsum(model.weights[states], axis=1)
    mix = np.minimum((u[:, None] > cum).sum(axis=1), K - 1)
    mu = model.means[states, mix]
    return mu + np.sqrt(model.variances[states, mix]) * rng.normal(size=(n, D))


def _utterance(gen, n, rng, silence_prob, gap_frames):
    X = sample_hmm(gen, n, rng)
    energy = rng.normal(15.0, SPEECH_ENERGY_SD, size=n)
    speech = np.ones(n, dtype=bool)
    if rng.random() < silence_prob and n > gap_frames[1] + 200:
        length = int(rng.integers(gap_frames[0], gap_frames[1] + 1))
        start = int(rng.integers(100, n - length - 100))
        X[start:start + length] = 0.3 * rng.normal(size=(length, X.shape[1]))
        energy[start:start + length] = rng.normal(5.0, 0.5, size=length)
        speech[start:start + length] = False
    return FeatureSequence(X, energy), speech


def synth_corpus(out_dir, n_speakers: int = 4, distance: float = 6.0, J: int = 1,
                 K: int = 4, train=(2, 10.0), enroll=(1, 30.0), test=(2, 10.0),
                 spread: float = 3.0, silence_prob: float = 0.0,
                 gap_seconds=(1.5, 2.5), n_streams: int = 2, seed: int = 0,
                 frame_shift: float = 0.010) -> SynthCorpus:
    """Write a synthetic multi-speaker feature corpus.

    Each speaker is a generator HMM: shared mixture centres (spread
    ``spread`` sigma) and weights shifted by a speaker offset, with offsets pairwise
    ``distance`` within-speaker sigmas apart. Roles ``train``, ``enroll``
    and ``test`` are ``(count, seconds)``. Utterances may carry one silence
    gap (low log energy, speaker-independent noise). Spliced streams
    concatenate test-style segments from several speakers and come with
    per-frame truth.
    """
    root = Path(out_dir)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "streams").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    D = FEATURE_DIM
    centres = spread * rng.normal(size=(J, K, D))
    weights = rng.dirichlet(np.full(K, 5.0), size=J)
    offsets = _speaker_offsets(n_speakers, D, distance, rng)
    speakers = [f"spk{i:02d}" for i in range(n_speakers)]
    gens = {s: _generator(centres, weights, offsets[i], J) for i, s in enumerate(speakers)}
    gap = (int(round(gap_seconds[0] / frame_shift)), int(round(gap_seconds[1] / frame_shift)))
    lines, truth = [], ["id\tspeaker\tspeech_frames\tsilent_from\tsilent_to"]
    for spk in speakers:
        for role, (count, seconds) in (("train", train), ("enroll", enroll), ("test", test)):
            for i in range(count):
                uid = f"{spk}_{role}{i:02d}"
                feats, speech = _utterance(gens[spk], int(round(seconds / frame_shift)),
                                           rng, silence_prob, gap)
                rel = f"features/{uid}.npy"
                save_features_npy(root / rel, feats)
                lines.append(f"{uid}\t{rel}\t{spk}\t{role}\tfeatures")
                sil = np.flatnonzero(~speech)
                lo, hi = (int(sil[0]), int(sil[-1]) + 1) if len(sil) else (-1, -1)
                truth.append(f"{uid}\t{spk}\t{int(speech.sum())}\t{lo}\t{hi}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    (root / "truth.tsv").write_text("\n".join(truth) + "\n")
    streams = []
    stream_lines = ["id\tpath\tchange_points"]
    for i in range(n_streams):
        order = rng.permutation(n_speakers)[:min(3, n_speakers)]
        blocks, labels = [], []
        for spk_idx in order:
            n = int(round(test[1] / frame_shift))
            blocks.append(sample_hmm(gens[speakers[spk_idx]], n, rng))
            labels += [speakers[spk_idx]] * n
        X = np.vstack(blocks)
        feats = FeatureSequence(X, rng.normal(15.0, SPEECH_ENERGY_SD, size=len(X)))
        sid = f"stream{i:02d}"
        save_features_npy(root / "streams" / f"{sid}.npy", feats)
        (root / "streams" / f"{sid}.truth").write_text("\n".join(labels) + "\n")
        changes = np.cumsum([len(b) for b in blocks])[:-1]
        stream_lines.append(f"{sid}\tstreams/{sid}.npy\t{','.join(map(str, changes))}")
        streams.append(sid)
    (root / "streams.tsv").write_text("\n".join(stream_lines) + "\n")
    return SynthCorpus(root, manifest, gens, streams)
