"""Command-line entry point: ``ava <subcommand>``.

Subcommands: train-si, enroll, stream, evaluate, synth, weer.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import AvaError, ManifestError
from .evaluation import confidence_range, kfold_split, read_trials_csv, synth_corpus, weer
from .frontend import compute_mfcc, load_features, read_wav, vad
from .hmm import WindowSpec, load_model, save_model
from .mve import load_pair, save_pair, write_trace_csv
from .stream import authenticate_stream, write_stream_csv
from .workflow import (Corpus, ManifestEntry, RunConfig, enroll_speaker, evaluate,
                       load_manifest, run_experiment, train_si)

log = logging.getLogger("ava")


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def _model_list(text):
    out = []
    for item in text.split(","):
        j, k = item.lower().split("x")
        out.append((int(j), int(k)))
    return out


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "nw", None) is not None:
        cfg = replace(cfg, window=WindowSpec(args.nw, cfg.window.stride))
    for flag, name in (("states", "n_states"), ("mixtures", "n_mix"), ("seed", "seed"),
                       ("iterations", "bw_iterations"), ("train_stride", "train_stride"),
                       ("token_stride", "token_stride"), ("enroll_seconds", "enroll_seconds")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, mve=replace(cfg.mve, epochs=args.epochs))
    if getattr(args, "skip_mve", False):
        cfg = replace(cfg, skip_mve=True)
    if getattr(args, "no_cms", False):
        cfg = replace(cfg, cms=False)
    return cfg


def _add_config_flags(p, model=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--nw", type=int, help="frames per window")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-cms", action="store_true", help="disable per-window CMS")
    if model:
        p.add_argument("--states", type=int)
        p.add_argument("--mixtures", type=int)
        p.add_argument("--iterations", type=int, help="Baum-Welch iterations")
        p.add_argument("--train-stride", type=int)
        p.add_argument("--token-stride", type=int)
        p.add_argument("--epochs", type=int, help="GPD epochs")
        p.add_argument("--enroll-seconds", type=float)
        p.add_argument("--skip-mve", action="store_true", help="stop after MAP adaptation")


# ---------------------------------------------------------------- commands

def cmd_train_si(args) -> int:
    cfg = build_config(args)
    corpus = Corpus(load_manifest(args.manifest), cfg)
    trace = []
    model = train_si(corpus, cfg, trace)
    save_model(args.out, model)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "mean_window_loglik"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    print(f"SI model: J={model.n_states} K={model.n_mix} -> {args.out}")
    return 0


def cmd_enroll(args) -> int:
    cfg = build_config(args)
    corpus = Corpus(load_manifest(args.manifest), cfg)
    si = load_model(args.si)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    speakers = args.speaker or sorted({e.speaker for e in corpus.select(role="enroll")})
    for spk in speakers:
        res = enroll_speaker(si, corpus, spk, cfg)
        save_pair(out / f"{spk}.pair.json", res.pair)
        write_trace_csv(out / f"{spk}.mve_trace.csv", res.trace)
        info = {"speaker": spk, "target_tokens": res.n_target_tokens,
                "cohort_size": res.cohort_size, "threshold": res.pair.threshold,
                "mve": not cfg.skip_mve}
        (out / f"{spk}.enroll.json").write_text(json.dumps(info, indent=1, sort_keys=True))
        print(f"{spk}: {res.n_target_tokens} target tokens, cohort {res.cohort_size}, "
              f"threshold {res.pair.threshold:.4f}")
    return 0


def cmd_stream(args) -> int:
    cfg = build_config(args)
    pair = load_pair(args.pair)
    if args.wav:
        feats = compute_mfcc(read_wav(args.wav), cfg.frame)
    else:
        feats = load_features(args.features, cfg.frame)
    mask = vad(feats, cfg.vad_neighborhood, cfg.vad_offset_db)
    threshold = pair.threshold if args.threshold is None else args.threshold
    stream = authenticate_stream(pair, feats, mask, cfg.window, threshold, cfg.cms,
                                 args.report_every)
    write_stream_csv(args.out, stream)
    n_speech = int(stream.vad_speech.sum())
    print(f"windows={len(stream)} speech={n_speech} "
          f"accept_fraction={stream.accept_fraction():.4f}")
    return 0


def _pairs_from_dir(path):
    pairs = {}
    for f in sorted(Path(path).glob("*.pair.json")):
        pairs[f.name[:-len(".pair.json")]] = load_pair(f)
    if not pairs:
        raise ManifestError(f"no *.pair.json files in {path}")
    return pairs


def _write_result(out: Path, result):
    out.mkdir(parents=True, exist_ok=True)
    for spk, report in sorted(result.reports.items()):
        report.write(out / f"{spk}.sweep.csv")
    (out / "report.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True))


def _restricted(entries, enroll_ids, test_ids):
    keep = []
    for e in entries:
        if e.role == "train":
            keep.append(e)
        elif e.uid in enroll_ids:
            keep.append(ManifestEntry(e.uid, e.path, e.speaker, "enroll", e.fmt))
        elif e.uid in test_ids:
            keep.append(ManifestEntry(e.uid, e.path, e.speaker, "test", e.fmt))
    return keep


def cmd_evaluate(args) -> int:
    base = build_config(args)
    entries = load_manifest(args.manifest)
    out = Path(args.out_dir)
    settings = []
    for nw in (args.sweep_nw or [None]):
        for jk in (args.sweep_model or [None]):
            for secs in (args.sweep_enroll_seconds or [None]):
                cfg = base
                tag = []
                if nw is not None:
                    cfg = replace(cfg, window=WindowSpec(nw, cfg.window.stride))
                    tag.append(f"nw{nw}")
                if jk is not None:
                    cfg = replace(cfg, n_states=jk[0], n_mix=jk[1])
                    tag.append(f"j{jk[0]}k{jk[1]}")
                if secs is not None:
                    cfg = replace(cfg, enroll_seconds=secs)
                    tag.append(f"enroll{secs:g}s")
                settings.append(("_".join(tag) or "default", cfg))
    sweeping = bool(args.sweep_nw or args.sweep_model or args.sweep_enroll_seconds)
    summary = {}
    if args.kfold:
        pool = [e for e in entries if e.role in ("enroll", "test")]
        for tag, cfg in settings:
            weers = []
            for rnd in range(args.rounds):
                for fold, (enroll_ids, test_ids) in enumerate(
                        kfold_split(pool, args.kfold, seed=cfg.seed + rnd)):
                    corpus = Corpus(_restricted(entries, set(enroll_ids), set(test_ids)), cfg)
                    _, _, result = run_experiment(corpus, cfg)
                    _write_result(out / tag / f"round{rnd}_fold{fold}", result)
                    weers.append(result.average_weer)
            mean, half = confidence_range(weers)
            summary[tag] = {"average_weer": mean, "ci95_half_width": half, "folds": weers}
            print(f"{tag}: WEER {mean:.3f}% +- {half:.3f} over {len(weers)} folds")
    elif sweeping or args.pairs_dir is None:
        for tag, cfg in settings:
            _, _, result = run_experiment(Corpus(entries, cfg), cfg)
            _write_result(out / tag, result)
            summary[tag] = result.summary()
            print(f"{tag}: average WEER {result.average_weer:.3f}%")
    else:
        cfg = base
        result = evaluate(_pairs_from_dir(args.pairs_dir), Corpus(entries, cfg), cfg)
        _write_result(out / "default", result)
        summary["default"] = result.summary()
        print(f"average WEER {result.average_weer:.3f}%")
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    corpus = synth_corpus(args.out, n_speakers=args.speakers, distance=args.distance,
                          J=args.states, K=args.mixtures,
                          train=(args.train_utts, args.train_seconds),
                          enroll=(args.enroll_utts, args.enroll_seconds),
                          test=(args.test_utts, args.test_seconds),
                          silence_prob=args.silence_prob, seed=args.seed)
    print(f"manifest: {corpus.manifest}")
    return 0


def cmd_weer(args) -> int:
    report = weer(read_trials_csv(args.trials))
    if args.out_csv:
        report.write(args.out_csv, args.out_json)
    elif args.out_json:
        Path(args.out_json).write_text(json.dumps(report.summary(), indent=1, sort_keys=True))
    print(f"WEER {report.weer:.4f}% at threshold {report.weer_threshold:.6g} "
          f"({report.n_target} target, {report.n_impostor} impostor, "
          f"{report.n_abstained} abstained)")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ava", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-si", help="train the speaker-independent HMM")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-iteration log-likelihood CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_si)

    p = sub.add_parser("enroll", help="MAP + cohort + MVE registration")
    p.add_argument("--si", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker", action="append", help="repeatable; default all")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("stream", help="score a recording window by window")
    p.add_argument("--pair", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav")
    src.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--report-every", type=int, default=1)
    _add_config_flags(p, model=False)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("evaluate", help="window EER over the test set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs-dir", help="pre-enrolled pairs; otherwise train from scratch")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sweep-nw", type=_int_list)
    p.add_argument("--sweep-model", type=_model_list, help="e.g. 1x8,2x4")
    p.add_argument("--sweep-enroll-seconds", type=_float_list)
    p.add_argument("--kfold", type=int)
    p.add_argument("--rounds", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic feature corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--distance", type=float, default=6.0)
    p.add_argument("--states", type=int, default=1)
    p.add_argument("--mixtures", type=int, default=4)
    p.add_argument("--train-utts", type=int, default=2)
    p.add_argument("--train-seconds", type=float, default=10.0)
    p.add_argument("--enroll-utts", type=int, default=1)
    p.add_argument("--enroll-seconds", type=float, default=30.0)
    p.add_argument("--test-utts", type=int, default=2)
    p.add_argument("--test-seconds", type=float, default=10.0)
    p.add_argument("--silence-prob", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("weer", help="re-score a trial CSV (llr,truth[,vad])")
    p.add_argument("--trials", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_weer)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AvaError as exc:
        print(f"ava {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
