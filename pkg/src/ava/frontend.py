"""Audio front-end: WAV decoding, 39-dim MFCC, per-window CMS and energy VAD.

Cepstral recipe: pre-emphasis 0.97, Hamming window, power spectrum,
23 triangular mel filters spanning 0 Hz to Nyquist, natural log with a
floor of 1e-10, DCT-II (orthonormal) keeping c0..c12, then first and
second order deltas by +-2 frame regression.
"""
from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import (
    EmptyInputError,
    UnsupportedFormatError,
    WavFormatError,
    WindowRangeError,
)

log = logging.getLogger(__name__)

N_CEPS = 13
N_MEL = 23
FEATURE_DIM = 3 * N_CEPS
PRE_EMPHASIS = 0.97
ENERGY_FLOOR = 1e-10
LOG_FLOOR = float(np.log(ENERGY_FLOOR))
DEFAULT_SAMPLE_RATE = 8000


@dataclass(frozen=True)
class FrameConfig:
    frame_duration: float = 0.025
    frame_shift: float = 0.010

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_duration:
            raise ValueError(
                f"need 0 < frame_shift <= frame_duration, got "
                f"{self.frame_shift} / {self.frame_duration}")

    def frame_length(self, sample_rate: int) -> int:
        return int(round(self.frame_duration * sample_rate))

    def shift_length(self, sample_rate: int) -> int:
        return int(round(self.frame_shift * sample_rate))

    def n_frames(self, n_samples: int, sample_rate: int) -> int:
        flen = self.frame_length(sample_rate)
        if n_samples < flen:
            return 0
        return 1 + (n_samples - flen) // self.shift_length(sample_rate)


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int16)
        if self.samples.ndim != 1:
            raise UnsupportedFormatError("audio must be mono")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    """Time-ordered feature frames plus per-frame log mel energy."""

    frames: np.ndarray
    log_energy: np.ndarray
    config: FrameConfig = field(default_factory=FrameConfig)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.log_energy = np.asarray(self.log_energy, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != FEATURE_DIM:
            raise ValueError(
                f"frames must be (T, {FEATURE_DIM}), got {self.frames.shape}")
        if len(self.frames) < 1:
            raise EmptyInputError("feature sequence has no frames")
        if self.log_energy.shape != (len(self.frames),):
            raise ValueError("log_energy must have one value per frame")
        if not np.all(np.isfinite(self.log_energy)):
            raise ValueError("log mel energy must be finite")

    def __len__(self):
        return len(self.frames)

    def select(self, keep) -> "FeatureSequence":
        keep = np.asarray(keep)
        return FeatureSequence(self.frames[keep], self.log_energy[keep], self.config)


# --------------------------------------------------------------------- WAV

def read_wav(path) -> AudioSignal:
    """Decode a mono 16-bit PCM RIFF/WAVE file."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except (EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: truncated RIFF data") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, need mono")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, need 16-bit PCM")
    if len(raw) != 2 * n:
        raise WavFormatError(
            f"{path}: data chunk truncated ({len(raw)} of {2 * n} bytes)")
    if rate != DEFAULT_SAMPLE_RATE:
        log.warning("%s: sample rate %d Hz differs from the %d Hz default",
                    path, rate, DEFAULT_SAMPLE_RATE)
    return AudioSignal(np.frombuffer(raw, dtype="<i2").astype(np.int16), rate)


def write_wav(path, audio: AudioSignal) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(audio.samples.astype("<i2").tobytes())


# -------------------------------------------------------------------- MFCC

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_filters: int = N_MEL) -> np.ndarray:
    """Triangular mel filters (n_filters, n_fft // 2 + 1) covering 0..Nyquist.

    Triangles are evaluated at the FFT bin frequencies, so narrow low
    filters never come out empty.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def filter_centers(sample_rate: int, n_filters: int = N_MEL) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_filters + 2))[1:-1]


def _fft_size(frame_length: int) -> int:
    return 1 << max(0, int(np.ceil(np.log2(frame_length))))


def mel_energies(audio: AudioSignal, cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Per-frame mel filter-bank energies, shape (T, 23)."""
    sr = audio.sample_rate
    flen, fshift = cfg.frame_length(sr), cfg.shift_length(sr)
    n_frames = cfg.n_frames(len(audio.samples), sr)
    if n_frames < 1:
        raise EmptyInputError(
            f"audio has {len(audio.samples)} samples, one frame needs {flen}")
    x = audio.samples.astype(np.float64) / 32768.0
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - PRE_EMPHASIS * x[:-1]
    idx = np.arange(flen)[None, :] + fshift * np.arange(n_frames)[:, None]
    frames = y[idx] * np.hamming(flen)
    n_fft = _fft_size(flen)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    return power @ mel_filterbank(sr, n_fft).T


def deltas(c: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames, edges replicated."""
    T = len(c)
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(c)
    for n in range(1, width + 1):
        num += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def compute_mfcc(audio: AudioSignal, cfg: FrameConfig = FrameConfig()) -> FeatureSequence:
    energies = mel_energies(audio, cfg)
    log_mel = np.log(np.maximum(energies, ENERGY_FLOOR))
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    d1 = deltas(ceps)
    d2 = deltas(d1)
    log_energy = np.log(np.maximum(energies.sum(axis=1), ENERGY_FLOOR))
    return FeatureSequence(np.hstack([ceps, d1, d2]), log_energy, cfg)


# --------------------------------------------------------------------- CMS

def window_cms(features: FeatureSequence, start: int, n_w: int) -> np.ndarray:
    """Frames start..start+n_w-1 with the window's static-cepstra mean removed."""
    T = len(features)
    if start < 0 or n_w < 1 or start + n_w > T:
        raise WindowRangeError(f"window [{start}, {start + n_w}) outside 0..{T}")
    block = features.frames[start:start + n_w].copy()
    block[:, :N_CEPS] -= block[:, :N_CEPS].mean(axis=0)
    return block


def sliding_cms(features: FeatureSequence, n_w: int, mask=None) -> FeatureSequence:
    """Normalize each frame by the static-cepstra mean of the window it anchors.

    The window for frame t starts at ``t - n_w // 2`` clamped into the
    sequence. With a VAD mask, only speech frames enter the mean (all frames
    when a window holds no speech). This yields a single feature stream that
    a growing Viterbi trellis can consume.
    """
    T = len(features)
    n_w = min(n_w, T)
    starts = np.clip(np.arange(T) - n_w // 2, 0, T - n_w)
    stat = features.frames[:, :N_CEPS]
    w = np.ones(T) if mask is None else np.asarray(mask, dtype=float)
    csum = np.vstack([np.zeros(N_CEPS), np.cumsum(stat * w[:, None], axis=0)])
    ccount = np.concatenate([[0.0], np.cumsum(w)])
    tot = csum[starts + n_w] - csum[starts]
    cnt = ccount[starts + n_w] - ccount[starts]
    if mask is not None and np.any(cnt == 0):
        allsum = np.vstack([np.zeros(N_CEPS), np.cumsum(stat, axis=0)])
        empty = cnt == 0
        tot[empty] = allsum[starts[empty] + n_w] - allsum[starts[empty]]
        cnt[empty] = n_w
    out = features.frames.copy()
    out[:, :N_CEPS] -= tot / cnt[:, None]
    return FeatureSequence(out, features.log_energy, features.config)


# --------------------------------------------------------------------- VAD

def vad(features: FeatureSequence, neighborhood: int = 80,
        threshold_offset: float = 6.0) -> np.ndarray:
    """Boolean speech mask from neighborhood-averaged log mel energy.

    Frame t is speech when the mean log mel energy over the ``neighborhood``
    frames centered on t (window shrunk at the edges) reaches the
    utterance's 10th-percentile log mel energy plus ``threshold_offset`` dB.
    """
    e = features.log_energy
    T = len(e)
    half = neighborhood // 2
    lo = np.clip(np.arange(T) - half, 0, T)
    hi = np.clip(np.arange(T) - half + neighborhood, 0, T)
    csum = np.concatenate([[0.0], np.cumsum(e)])
    avg = (csum[hi] - csum[lo]) / (hi - lo)
    # log mel energy is in nepers of power; the offset arrives in dB
    threshold = np.percentile(e, 10) + threshold_offset * np.log(10.0) / 10.0
    tol = 1e-9 * max(1.0, float(np.max(np.abs(e))))
    return avg >= threshold - tol


# -------------------------------------------------------------- feature I/O

def dump_features(path, features: FeatureSequence) -> None:
    """Write the 40-column text dump (39 features then log mel energy)."""
    data = np.column_stack([features.frames, features.log_energy])
    np.savetxt(path, data, fmt="%.17g")


def load_features(path, config: FrameConfig = FrameConfig()) -> FeatureSequence:
    """Read a feature file: ``.npy`` (T, 40) array or the 40-column text dump."""
    path = Path(path)
    if path.suffix == ".npy":
        data = np.load(path)
    else:
        data = np.loadtxt(path, ndmin=2)
    if data.ndim != 2 or data.shape[1] != FEATURE_DIM + 1:
        raise ValueError(f"{path}: expected {FEATURE_DIM + 1} columns, got {data.shape}")
    return FeatureSequence(data[:, :FEATURE_DIM], data[:, FEATURE_DIM], config)


def save_features_npy(path, features: FeatureSequence) -> None:
    np.save(path, np.column_stack([features.frames, features.log_energy]))
