"""MFCC front end: raw audio in, per-frame acoustic feature matrices out.

Fixed recipe: 16 kHz mono input, 25 ms Hamming windows every 10 ms,
pre-emphasis 0.97, 26 triangular mel filters over 0..Nyquist, orthonormal
DCT-II keeping cepstra 1..12, log total frame energy appended as the 13th
dimension. First and second order delta features (regression over a +/-2
frame window with edge replication) extend 13 dims to 37.

Everything here is a pure function of its inputs: identical signals give
bitwise-identical features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fftpack import dct
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
N_MELS = 26
N_COEFFS = 12
PREEMPHASIS = 0.97
LOG_FLOOR = 1e-10
NFFT = 512
DELTA_WINDOW = 2

PLAIN_DIM = N_COEFFS + 1   # cepstra 1..12 plus log energy
DELTA_DIM = 3 * PLAIN_DIM


class SignalTooShortError(ValueError):
    """Signal shorter than one analysis window."""


class SampleRateError(ValueError):
    """Only 16 kHz input is supported; resampling is out of scope."""


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise ValueError("audio samples contain non-finite values")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """Time-major acoustic features: one row per 25 ms window at a 10 ms hop."""

    frames: np.ndarray           # T x D, float32
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_length_ms: int = FRAME_LENGTH_MS

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.n_frames * self.frame_shift_ms


def read_wav(path) -> AudioSignal:
    """Load 16-bit PCM mono WAV, scaled to [-1, 1)."""
    rate, data = wavfile.read(path)
    if data.dtype != np.int16:
        raise ValueError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    return AudioSignal(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, signal.sample_rate, pcm)


def truncate(signal: AudioSignal, max_ms: float) -> AudioSignal:
    """Cut the signal to at most ``max_ms``; shorter signals pass through."""
    if max_ms <= 0:
        raise ValueError(f"max_ms must be positive, got {max_ms}")
    limit = int(max_ms * signal.sample_rate / 1000)
    if len(signal.samples) <= limit:
        return signal
    return AudioSignal(signal.samples[:limit].copy(), signal.sample_rate)


def frame_count(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = sample_rate * FRAME_LENGTH_MS // 1000
    hop = sample_rate * FRAME_SHIFT_MS // 1000
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def mel_filterbank(n_mels: int = N_MELS, nfft: int = NFFT,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale, spanning 0..Nyquist. (n_mels, nfft//2+1)."""
    low_mel = 0.0
    high_mel = 2595.0 * np.log10(1.0 + (sample_rate / 2.0) / 700.0)
    mel_points = np.linspace(low_mel, high_mel, n_mels + 2)
    hz_points = 700.0 * (10.0 ** (mel_points / 2595.0) - 1.0)
    bins = np.floor((nfft + 1) * hz_points / sample_rate).astype(int)
    fb = np.zeros((n_mels, nfft // 2 + 1))
    for j in range(n_mels):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        for i in range(left, center):
            fb[j, i] = (i - left) / (center - left)
        for i in range(center, right):
            fb[j, i] = (right - i) / (right - center)
    return fb


def mel_filter_centers_hz(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    high_mel = 2595.0 * np.log10(1.0 + (sample_rate / 2.0) / 700.0)
    mel_points = np.linspace(0.0, high_mel, n_mels + 2)
    return 700.0 * (10.0 ** (mel_points[1:-1] / 2595.0) - 1.0)


def _frames_of(signal: AudioSignal) -> np.ndarray:
    if signal.sample_rate != SAMPLE_RATE:
        raise SampleRateError(f"expected {SAMPLE_RATE} Hz input, got {signal.sample_rate} Hz")
    x = signal.samples
    win = SAMPLE_RATE * FRAME_LENGTH_MS // 1000
    hop = SAMPLE_RATE * FRAME_SHIFT_MS // 1000
    n = frame_count(len(x))
    if n == 0:
        raise SignalTooShortError(
            f"signal of {len(x)} samples is shorter than one {win}-sample window")
    # pre-emphasis over the whole signal, then strided framing
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - PREEMPHASIS * x[:-1]
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return emph[idx]


def filterbank_energies(signal: AudioSignal) -> np.ndarray:
    """Per-frame mel filterbank energies (T, n_mels), before the log."""
    frames = _frames_of(signal) * np.hamming(SAMPLE_RATE * FRAME_LENGTH_MS // 1000)
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2 / NFFT
    return power @ mel_filterbank().T


def mfcc(signal: AudioSignal) -> FeatureMatrix:
    """12 cepstral coefficients plus log total frame energy per frame (T x 13)."""
    frames = _frames_of(signal) * np.hamming(SAMPLE_RATE * FRAME_LENGTH_MS // 1000)
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2 / NFFT
    fbank = power @ mel_filterbank().T
    log_fbank = np.log(np.maximum(fbank, LOG_FLOOR))
    cepstra = dct(log_fbank, type=2, axis=1, norm="ortho")[:, 1:N_COEFFS + 1]
    energy = np.log(np.maximum(power.sum(axis=1), LOG_FLOOR))
    feats = np.hstack([cepstra, energy[:, None]]).astype(np.float32)
    return FeatureMatrix(feats)


def add_deltas(feats: FeatureMatrix) -> FeatureMatrix:
    """Append first and second order regression deltas (T x 13 -> T x 37)."""
    base = feats.frames.astype(np.float64)
    if base.shape[0] < 1:
        raise ValueError("cannot compute deltas of an empty feature matrix")
    d1 = _regression_delta(base)
    d2 = _regression_delta(d1)
    out = np.hstack([base, d1, d2]).astype(np.float32)
    return FeatureMatrix(out, feats.frame_shift_ms, feats.frame_length_ms)


def _regression_delta(c: np.ndarray) -> np.ndarray:
    n = DELTA_WINDOW
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    t_max = c.shape[0] - 1
    out = np.zeros_like(c)
    for k in range(1, n + 1):
        ahead = c[np.minimum(np.arange(c.shape[0]) + k, t_max)]
        behind = c[np.maximum(np.arange(c.shape[0]) - k, 0)]
        out += k * (ahead - behind)
    return out / denom
