"""Manifests, run configuration and the train / enroll / authenticate / evaluate pipelines."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import MapConfig, map_adapt
from .errors import ArgumentError, InsufficientDataError, ManifestError, NoDecisionError
from .evaluation import utterance_vote, weer
from .frontend import (FeatureSequence, FrameConfig, compute_mfcc, load_features,
                       read_wav, sliding_cms, vad)
from .hmm import (Hmm, WindowSpec, baum_welch_short, kmeans_init, model_hash,
                  sliding_viterbi)
from .mve import (MveConfig, SpeakerModelPair, cohort_select, gpd_train,
                  make_tokens, score_tokens)
from .stream import ScoreStream, decide

log = logging.getLogger(__name__)

ROLES = ("train", "enroll", "test")
FORMATS = ("wav", "features")


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    uid: str
    path: Path
    speaker: str
    role: str
    fmt: str


def parse_manifest(text: str, base: Path = Path(".")) -> list[ManifestEntry]:
    entries, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ManifestError(f"line {lineno}: expected 5 tab-separated fields")
        uid, path, spk, role, fmt = parts
        if uid in seen:
            raise ManifestError(f"duplicate utterance id {uid!r}")
        if role not in ROLES:
            raise ManifestError(f"{uid}: unknown role {role!r}")
        if fmt not in FORMATS:
            raise ManifestError(f"{uid}: unknown format {fmt!r}")
        seen.add(uid)
        p = Path(path)
        entries.append(ManifestEntry(uid, p if p.is_absolute() else base / p, spk, role, fmt))
    return entries


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = parse_manifest(path.read_text(), path.parent)
    missing = [e.uid for e in entries if not e.path.exists()]
    if missing:
        raise ManifestError(f"unresolvable paths for entries: {', '.join(missing)}")
    check_role_separation(entries)
    return entries


def format_manifest(entries: Sequence[ManifestEntry], base: Path | None = None) -> str:
    lines = []
    for e in entries:
        p = e.path
        if base is not None:
            try:
                p = e.path.relative_to(base)
            except ValueError:
                pass
        lines.append("\t".join([e.uid, str(p), e.speaker, e.role, e.fmt]))
    return "\n".join(lines) + "\n"


def check_role_separation(entries: Sequence[ManifestEntry]) -> None:
    """Reject any speaker whose enrollment and test sets share audio."""
    enroll = {(e.speaker, e.path.resolve()): e.uid for e in entries if e.role == "enroll"}
    clash = [(enroll[(e.speaker, e.path.resolve())], e.uid) for e in entries
             if e.role == "test" and (e.speaker, e.path.resolve()) in enroll]
    if clash:
        pairs = ", ".join(f"{a}/{b}" for a, b in clash)
        raise ManifestError(f"enrollment and test data overlap: {pairs}")


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    frame: FrameConfig = field(default_factory=FrameConfig)
    window: WindowSpec = field(default_factory=WindowSpec)
    n_states: int = 1
    n_mix: int = 512
    map: MapConfig = field(default_factory=MapConfig)
    mve: MveConfig = field(default_factory=MveConfig)
    bw_iterations: int = 10
    train_stride: int = 1
    token_stride: int = 1
    cms: bool = True
    vad_neighborhood: int = 80
    vad_offset_db: float = 6.0
    skip_mve: bool = False
    enroll_seconds: float | None = None
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        nested = {"frame": FrameConfig, "window": WindowSpec, "map": MapConfig, "mve": MveConfig}
        kwargs = {}
        for key, value in doc.items():
            if key in nested:
                kwargs[key] = nested[key](**value)
            elif key in cls.__dataclass_fields__:
                kwargs[key] = value
            else:
                raise ArgumentError(f"unknown config field {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ data access

@dataclass
class Utterance:
    entry: ManifestEntry
    features: FeatureSequence
    speech: np.ndarray


def load_utterance(entry: ManifestEntry, cfg: RunConfig) -> Utterance:
    if entry.fmt == "wav":
        feats = compute_mfcc(read_wav(entry.path), cfg.frame)
    else:
        feats = load_features(entry.path, cfg.frame)
    return Utterance(entry, feats, vad(feats, cfg.vad_neighborhood, cfg.vad_offset_db))


def training_frames(utt: Utterance, cfg: RunConfig):
    """Mean-normalized frames and speech mask, or None without a full window of speech."""
    if len(utt.features) < cfg.window.n_w or utt.speech.sum() < cfg.window.n_w:
        log.warning("%s: fewer than %d speech frames, skipped", utt.entry.uid, cfg.window.n_w)
        return None
    return prepared_stream(utt, cfg), utt.speech


class Corpus:
    """Lazily loaded utterances of a manifest."""

    def __init__(self, entries: Sequence[ManifestEntry], cfg: RunConfig):
        self.entries = list(entries)
        self.cfg = cfg
        self._cache: dict = {}

    def utterance(self, entry: ManifestEntry) -> Utterance:
        if entry.uid not in self._cache:
            self._cache[entry.uid] = load_utterance(entry, self.cfg)
        return self._cache[entry.uid]

    def select(self, role=None, speaker=None, exclude_speaker=None):
        return [e for e in self.entries
                if (role is None or e.role == role)
                and (speaker is None or e.speaker == speaker)
                and (exclude_speaker is None or e.speaker != exclude_speaker)]

    def training_set(self, entries, cfg: RunConfig, max_frames: int | None = None):
        """Prepared frames and speech masks keyed by utterance id."""
        frames, speech, used = {}, {}, 0
        for e in entries:
            prepared = training_frames(self.utterance(e), cfg)
            if prepared is None:
                continue
            X, sp = prepared
            if max_frames is not None:
                if used >= max_frames:
                    break
                X, sp = X[:max_frames - used], sp[:max_frames - used]
                if len(X) < cfg.window.n_w:
                    break
                used += len(X)
            frames[e.uid], speech[e.uid] = X, sp
        return frames, speech

    @property
    def speakers(self):
        return sorted({e.speaker for e in self.entries})


# --------------------------------------------------------------- pipelines

def train_si(corpus: Corpus, cfg: RunConfig, trace: list | None = None) -> Hmm:
    entries = corpus.select(role="train")
    if not entries:
        raise ManifestError("manifest has no train-role entries")
    data, _ = corpus.training_set(entries, cfg)
    if not data:
        raise InsufficientDataError("no training utterance holds a full window of speech")
    utts = [data[k] for k in sorted(data)]
    model = kmeans_init(utts, cfg.n_states, cfg.n_mix, seed=cfg.seed, frame_config=cfg.frame)
    spec = WindowSpec(cfg.window.n_w, cfg.train_stride)
    model = baum_welch_short(model, utts, spec, cfg.bw_iterations, trace)
    model.metadata = {"kind": "si", "n_w": cfg.window.n_w,
                      "train_utterances": sorted(data)}
    return model


@dataclass
class EnrollResult:
    pair: SpeakerModelPair
    trace: list
    n_target_tokens: int
    cohort_size: int


def enroll_speaker(si: Hmm, corpus: Corpus, speaker: str, cfg: RunConfig) -> EnrollResult:
    """MAP-adapt, select the cohort, run GPD and set the operating threshold."""
    max_frames = None if cfg.enroll_seconds is None else int(
        round(cfg.enroll_seconds / cfg.frame.frame_shift))
    target_data, target_speech = corpus.training_set(
        corpus.select(role="enroll", speaker=speaker), cfg, max_frames)
    if not target_data:
        raise ArgumentError(f"speaker {speaker!r} has no usable enrollment data")
    impostor_data, impostor_speech = corpus.training_set(
        corpus.select(role="train", exclude_speaker=speaker), cfg)
    if not impostor_data:
        raise ArgumentError(f"no impostor training data for speaker {speaker!r}")
    sa = map_adapt(si, [target_data[k] for k in sorted(target_data)],
                   WindowSpec(cfg.window.n_w, cfg.train_stride), cfg.map)
    pair = SpeakerModelPair(sa, si.copy(), 0.0, {"speaker": speaker,
                                                 "si_hash": model_hash(si)})
    utterances = {**target_data, **impostor_data}
    tok_spec = WindowSpec(cfg.window.n_w, cfg.token_stride)
    targets = make_tokens(target_data, tok_spec, True, target_speech)
    impostors = make_tokens(impostor_data, tok_spec, False, impostor_speech)
    r = min(len(targets), len(impostors))
    if r < len(targets):
        log.warning("%s: only %d impostor tokens for %d target tokens",
                    speaker, len(impostors), len(targets))
    cohort = cohort_select(pair, impostors, utterances, r)
    trace = []
    if not cfg.skip_mve:
        pair, trace = gpd_train(pair, targets, cohort, utterances, cfg.mve)
    st = score_tokens(pair, targets, utterances)
    sc = score_tokens(pair, cohort, utterances)
    pair.threshold = weer(np.concatenate([st.llr, sc.llr]),
                          np.r_[np.ones(len(targets), bool), np.zeros(len(cohort), bool)]
                          ).weer_threshold
    pair.metadata.update({"mve": not cfg.skip_mve, "n_target_tokens": len(targets),
                          "cohort_size": len(cohort)})
    return EnrollResult(pair, trace, len(targets), len(cohort))


def prepared_stream(utt: Utterance, cfg: RunConfig) -> np.ndarray:
    if cfg.cms:
        return sliding_cms(utt.features, cfg.window.n_w, utt.speech).frames
    return utt.features.frames


def score_stream(pair: SpeakerModelPair, X: np.ndarray, speech: np.ndarray,
                 spec: WindowSpec, threshold: float, frame_shift: float = 0.010,
                 anti_scores=None) -> ScoreStream:
    s0 = sliding_viterbi(pair.target, X, spec)
    s1 = anti_scores if anti_scores is not None else sliding_viterbi(pair.anti_target, X, spec)
    llr = s0.scores - s1.scores
    vad_flags = speech[s0.anchors]
    return ScoreStream(s0.anchors, llr, vad_flags, decide(llr, vad_flags, threshold),
                       frame_shift)


@dataclass
class EvaluationResult:
    reports: dict
    average_weer: float
    streams: dict
    utterance_eer: float | None = None
    vote_accuracy: float | None = None

    def summary(self) -> dict:
        return {"average_weer": self.average_weer,
                "utterance_eer": self.utterance_eer,
                "vote_accuracy": self.vote_accuracy,
                "speakers": {s: r.summary() for s, r in sorted(self.reports.items())}}


def evaluate(pairs: dict, corpus: Corpus, cfg: RunConfig) -> EvaluationResult:
    """Score every speaker's pair against all test utterances.

    Own-speaker windows are target trials, everyone else's impostor trials.
    Silent-anchor windows are excluded from the metrics.
    """
    tests = corpus.select(role="test")
    if not tests:
        raise ManifestError("manifest has no test-role entries")
    spec = WindowSpec(cfg.window.n_w, 1)
    prepared = {}
    for e in tests:
        utt = corpus.utterance(e)
        if len(utt.features) < spec.n_w:
            log.warning("%s: shorter than one window, skipped", e.uid)
            continue
        prepared[e.uid] = (e, prepared_stream(utt, cfg), utt.speech)
    reports, streams = {}, {}
    anti_cache: dict = {}
    for spk in sorted(pairs):
        pair = pairs[spk]
        anti_key = model_hash(pair.anti_target)
        scores, labels, speech = [], [], []
        for uid in sorted(prepared):
            e, X, sp = prepared[uid]
            cache_key = (anti_key, uid)
            if cache_key not in anti_cache:
                anti_cache[cache_key] = sliding_viterbi(pair.anti_target, X, spec)
            stream = score_stream(pair, X, sp, spec, pair.threshold, cfg.frame.frame_shift,
                                  anti_cache[cache_key])
            streams[(spk, uid)] = stream
            scores.append(stream.scores)
            labels.append(np.full(len(stream), e.speaker == spk))
            speech.append(stream.vad_speech)
        reports[spk] = weer(np.concatenate(scores), np.concatenate(labels),
                            np.concatenate(speech))
    avg = float(np.mean([r.weer for r in reports.values()]))
    result = EvaluationResult(reports, avg, streams)
    _utterance_level(result, prepared)
    return result


def _utterance_level(result: EvaluationResult, prepared: dict) -> None:
    """Majority vote per utterance at each speaker's window-WEER threshold."""
    eers, correct, total = [], 0, 0
    for spk, report in sorted(result.reports.items()):
        fracs, truth = [], []
        for uid, (e, _, _) in sorted(prepared.items()):
            stream = result.streams[(spk, uid)]
            decisions = decide(stream.scores, stream.vad_speech, report.weer_threshold)
            try:
                vote = utterance_vote(decisions, e.speaker == spk)
            except NoDecisionError:
                continue
            correct += bool(vote.correct)
            total += 1
            fracs.append(vote.accepts / vote.decided)
            truth.append(e.speaker == spk)
        if any(truth) and not all(truth):
            eers.append(weer(np.array(fracs), np.array(truth)).weer)
    result.utterance_eer = float(np.mean(eers)) if eers else None
    result.vote_accuracy = correct / total if total else None


def run_experiment(corpus: Corpus, cfg: RunConfig, speakers=None):
    """Train the SI model, enroll every speaker and evaluate."""
    si = train_si(corpus, cfg)
    speakers = speakers or sorted({e.speaker for e in corpus.select(role="enroll")})
    enrolled = {spk: enroll_speaker(si, corpus, spk, cfg) for spk in speakers}
    result = evaluate({s: r.pair for s, r in enrolled.items()}, corpus, cfg)
    return si, enrolled, result


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
