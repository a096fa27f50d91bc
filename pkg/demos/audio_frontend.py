"""From a WAV file to features and a speech mask.

Writes 3 s of audio (noise, near-silence, noise), extracts MFCCs and runs
the energy VAD.

    python demos/audio_frontend.py
"""
import tempfile
from pathlib import Path

import numpy as np

from ava.frontend import AudioSignal, compute_mfcc, read_wav, vad, write_wav


def noise(seconds, dbfs, rng, rate=8000):
    amp = 32767 * 10 ** (dbfs / 20)
    return amp * rng.standard_normal(int(seconds * rate))


def main():
    rng = np.random.default_rng(0)
    samples = np.concatenate([noise(1, -10, rng), noise(1, -30, rng), noise(1, -10, rng)])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "demo.wav"
        write_wav(path, AudioSignal(np.clip(samples, -32768, 32767).astype(np.int16)))
        audio = read_wav(path)
    feats = compute_mfcc(audio)
    mask = vad(feats)
    print(f"{len(audio.samples)} samples -> {len(feats)} frames x {feats.frames.shape[1]} "
          f"features")
    for name, lo, hi in (("first second", 0, 98), ("middle second", 100, 198),
                         ("last second", 200, len(feats))):
        print(f"  {name}: {mask[lo:hi].mean():.0%} of frames marked speech")


if __name__ == "__main__":
    main()
