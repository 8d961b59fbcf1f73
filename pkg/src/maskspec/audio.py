"""Waveform standardization and the log-mel frontend.

Pipeline: :func:`standardize` (32 kHz, mono, 10 s) -> :func:`stft_power`
(Hamming 1024 / hop 320, 1000 frames) -> :func:`logmel` (128 HTK mel bands,
log with a 1e-5 floor, last 8 frames dropped) giving a ``(992, 128)``
time-by-frequency matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 32000
CLIP_SECONDS = 10
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS
N_FFT = 1024
HOP = 320
N_MELS = 128
N_FRAMES = 1000
TRIM_FRAMES = 8
LOG_EPS = 1e-5
F_MIN = 0.0
F_MAX = SAMPLE_RATE / 2

CHANNEL_MODES = ("left", "right", "mean")


class AudioInputError(ValueError):
    """Audio that cannot be turned into a clip (empty, bad channel layout, ...)."""


@dataclass(frozen=True)
class WaveformClip:
    """Audio samples shaped ``(channels, length)`` with their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        object.__setattr__(self, "samples", s)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise AudioInputError("clip is not mono")
        return self.samples[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    f_min: float = F_MIN
    f_max: float = F_MAX

    @property
    def center_hz(self) -> np.ndarray:
        edges = mel_to_hz(np.linspace(hz_to_mel(self.f_min), hz_to_mel(self.f_max), self.weights.shape[0] + 2))
        return edges[1:-1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def select_channel(samples: np.ndarray, mode: str) -> np.ndarray:
    """Reduce ``(channels, length)`` audio to one channel."""
    if mode not in CHANNEL_MODES:
        raise AudioInputError(f"channel mode must be one of {CHANNEL_MODES}, got {mode!r}")
    if samples.shape[0] == 1:
        return samples[0]
    if samples.shape[0] != 2:
        raise AudioInputError(f"expected 1 or 2 channels, got {samples.shape[0]}")
    if mode == "left":
        return samples[0]
    if mode == "right":
        return samples[1]
    return (samples[0] + samples[1]) / 2


def standardize(clip: WaveformClip, channel: str = "mean") -> WaveformClip:
    """Resample to 32 kHz, reduce to mono and pad/truncate to exactly 10 s.

    ``channel`` picks how stereo input is reduced: ``"left"``, ``"right"``
    or ``"mean"``.
    """
    if clip.sample_rate <= 0:
        raise AudioInputError(f"sample rate must be positive, got {clip.sample_rate}")
    if clip.samples.size == 0:
        raise AudioInputError("empty audio")
    x = select_channel(np.asarray(clip.samples, dtype=np.float64), channel)
    if clip.sample_rate != SAMPLE_RATE:
        g = gcd(int(clip.sample_rate), SAMPLE_RATE)
        x = resample_poly(x, SAMPLE_RATE // g, int(clip.sample_rate) // g)
    if len(x) >= CLIP_SAMPLES:
        x = x[:CLIP_SAMPLES]
    else:
        x = np.pad(x, (0, CLIP_SAMPLES - len(x)))
    return WaveformClip(x, SAMPLE_RATE)


@lru_cache(maxsize=1)
def _hamming() -> np.ndarray:
    w = get_window("hamming", N_FFT, fftbins=True)
    w.flags.writeable = False
    return w


def stft_power(clip: WaveformClip | np.ndarray) -> np.ndarray:
    """Power spectrogram ``(1000, 513)`` of a standardized clip.

    The signal is reflect-padded by ``N_FFT // 2`` on each side, framed at a
    hop of 320 samples and the first 1000 frames are kept.
    """
    x = clip.mono if isinstance(clip, WaveformClip) else np.asarray(clip, dtype=np.float64)
    pad = N_FFT // 2
    if len(x) <= pad:
        x = np.pad(x, (0, pad + 1 - len(x)))
    xp = np.pad(x, pad, mode="reflect")
    n_avail = 1 + (len(xp) - N_FFT) // HOP
    frames = np.lib.stride_tricks.sliding_window_view(xp, N_FFT)[::HOP][: min(N_FRAMES, n_avail)]
    spec = np.fft.rfft(frames * _hamming(), n=N_FFT, axis=-1)
    power = spec.real**2 + spec.imag**2
    if power.shape[0] < N_FRAMES:
        power = np.pad(power, ((0, N_FRAMES - power.shape[0]), (0, 0)))
    return power


def _triangle_integral(x: np.ndarray, lo: float, mid: float, hi: float) -> np.ndarray:
    """Antiderivative (from -inf) of the unit-peak triangle on ``[lo, hi]``."""
    x = np.clip(x, lo, hi)
    rise = np.where(x <= mid, (x - lo) ** 2 / (2 * (mid - lo)), (mid - lo) / 2)
    fall_x = np.maximum(x - mid, 0.0)
    fall = fall_x - fall_x**2 / (2 * (hi - mid))
    return rise + fall


def build_mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE, f_min: float = F_MIN, f_max: float = F_MAX
) -> MelFilterbank:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Each weight is the mean of the triangle over the frequency interval the
    FFT bin covers, so narrow low-frequency filters that fall between bin
    centres still receive positive weight.
    """
    n_bins = n_fft // 2 + 1
    bin_width = sample_rate / n_fft
    centers = np.arange(n_bins) * bin_width
    left, right = centers - bin_width / 2, centers + bin_width / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    weights = np.empty((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        weights[m] = (_triangle_integral(right, lo, mid, hi) - _triangle_integral(left, lo, mid, hi)) / bin_width
    weights.flags.writeable = False
    return MelFilterbank(weights, f_min, f_max)


@lru_cache(maxsize=1)
def default_filterbank() -> MelFilterbank:
    return build_mel_filterbank()


def logmel(power: np.ndarray, fb: MelFilterbank | None = None) -> np.ndarray:
    """``log(power @ fb.T + 1e-5)`` with the last 8 frames removed."""
    fb = fb or default_filterbank()
    if power.shape[-1] != fb.weights.shape[1]:
        raise ValueError(f"power has {power.shape[-1]} bins, filterbank expects {fb.weights.shape[1]}")
    mel = power @ fb.weights.T
    return np.log(mel + LOG_EPS)[:-TRIM_FRAMES]


def spectrogram(clip: WaveformClip, channel: str = "mean", dtype=np.float32) -> np.ndarray:
    """Full frontend: any clip to a ``(992, 128)`` log-mel matrix."""
    std = clip if _is_standard(clip) else standardize(clip, channel)
    return logmel(stft_power(std)).astype(dtype)


def waveform_to_spectrogram(samples: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Frontend for an already-standardized mono waveform of 320000 samples."""
    return logmel(stft_power(np.asarray(samples, dtype=np.float64))).astype(dtype)


def _is_standard(clip: WaveformClip) -> bool:
    return clip.sample_rate == SAMPLE_RATE and clip.channels == 1 and clip.samples.shape[1] == CLIP_SAMPLES


def read_wav(path: str | Path) -> WaveformClip:
    """Read 16-bit PCM or 32-bit float WAV into a float clip in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioInputError(f"unsupported WAV sample type {data.dtype} in {path}")
    if x.size == 0:
        raise AudioInputError(f"empty audio in {path}")
    x = x[None, :] if x.ndim == 1 else x.T
    return WaveformClip(x, int(rate))


def write_wav(path: str | Path, clip: WaveformClip, pcm16: bool = True) -> None:
    data = clip.samples.T if clip.channels > 1 else clip.samples[0]
    if pcm16:
        data = np.clip(np.round(data * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    wavfile.write(str(path), clip.sample_rate, data)
