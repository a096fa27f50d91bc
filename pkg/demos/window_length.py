"""Trade latency for accuracy: window EER against window length.

Longer windows give each decision more evidence but delay it. For every
window length the SI model is retrained and all speakers are MAP-enrolled.

    python demos/window_length.py [distance]
"""
import sys
import tempfile

from ava.evaluation import synth_corpus
from ava.hmm import WindowSpec
from ava.stream import stream_latency_report
from ava.workflow import (Corpus, RunConfig, enroll_speaker, evaluate, load_manifest,
                          train_si, with_overrides)


def main(distance):
    with tempfile.TemporaryDirectory() as tmp:
        info = synth_corpus(tmp, n_speakers=8, distance=distance, seed=0)
        base = RunConfig(n_mix=8, skip_mve=True)
        corpus = Corpus(load_manifest(info.manifest), base)
        print(f"{'frames':>7} {'latency s':>10} {'window EER %':>13} {'utterance EER %':>16}")
        for n_w in (11, 51, 101, 201, 501):
            cfg = with_overrides(base, window=WindowSpec(n_w))
            si = train_si(corpus, cfg)
            pairs = {s: enroll_speaker(si, corpus, s, cfg).pair for s in corpus.speakers}
            res = evaluate(pairs, corpus, cfg)
            print(f"{n_w:>7} {stream_latency_report(cfg.window):>10.3f} "
                  f"{res.average_weer:>13.2f} {res.utterance_eer:>16.2f}")


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 1.5)
