"""Sequential per-window authentication over a feature stream."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError
from .frontend import FeatureSequence, FrameConfig, sliding_cms
from .hmm import WindowSpec, sliding_viterbi
from .mve import SpeakerModelPair

ACCEPT, REJECT, ABSTAIN = "accept", "reject", "abstain"
STREAM_COLUMNS = ("anchor_frame", "time_s", "llr", "vad", "decision")


@dataclass
class ScoreStream:
    anchors: np.ndarray
    scores: np.ndarray
    vad_speech: np.ndarray
    decisions: list
    frame_shift: float = 0.010
    truth: np.ndarray | None = None

    def __len__(self):
        return len(self.anchors)

    @property
    def times(self):
        return self.anchors * self.frame_shift

    def accept_fraction(self) -> float:
        """Share of speech windows accepted (0 when nothing was decided)."""
        speech = self.vad_speech
        if not np.any(speech):
            return 0.0
        return float(np.mean([d == ACCEPT for d, v in zip(self.decisions, speech) if v]))


def decide(scores, vad_speech, threshold: float) -> list:
    return [ABSTAIN if not v else (ACCEPT if s >= threshold else REJECT)
            for s, v in zip(scores, vad_speech)]


def authenticate_stream(pair: SpeakerModelPair, features: FeatureSequence, mask,
                        spec: WindowSpec, threshold: float | None = None,
                        cms: bool = True, report_every: int = 1) -> ScoreStream:
    """Score each window as g(X|target) - g(X|anti-target) and decide.

    Both scores come from one growing trellis per model. Windows whose
    anchor (middle) frame is silent abstain but keep their score.
    ``report_every`` thins the emitted rows without changing computation.
    """
    T = len(features)
    if T < spec.n_w:
        raise InsufficientDataError(f"{T} frames < one window of {spec.n_w}")
    if threshold is None:
        threshold = pair.threshold
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T,):
        raise ValueError("VAD mask must align with the feature frames")
    X = sliding_cms(features, spec.n_w, mask).frames if cms else features.frames
    s0 = sliding_viterbi(pair.target, X, spec)
    s1 = sliding_viterbi(pair.anti_target, X, spec)
    keep = slice(None, None, report_every)
    anchors = s0.anchors[keep]
    llr = (s0.scores - s1.scores)[keep]
    speech = mask[anchors]
    return ScoreStream(anchors, llr, speech, decide(llr, speech, threshold),
                       features.config.frame_shift)


def stream_latency_report(spec: WindowSpec, cfg: FrameConfig = FrameConfig()) -> float:
    """Seconds of audio needed before the first decision."""
    return spec.duration(cfg)


def write_stream_csv(path, stream: ScoreStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STREAM_COLUMNS)
        for a, t, s, v, d in zip(stream.anchors, stream.times, stream.scores,
                                 stream.vad_speech, stream.decisions):
            w.writerow([int(a), repr(float(t)), repr(float(s)), int(bool(v)), d])


def read_stream_csv(path, frame_shift: float = 0.010) -> ScoreStream:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ScoreStream(np.array([int(r["anchor_frame"]) for r in rows], dtype=int),
                       np.array([float(r["llr"]) for r in rows]),
                       np.array([r["vad"] == "1" for r in rows], dtype=bool),
                       [r["decision"] for r in rows], frame_shift)
