"""Raw audio to normalized log-power spectrogram.

The pipeline is mixdown -> resample -> fix_duration -> log_power_spectrogram
-> normalize, wrapped by :func:`compute_spectrogram`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass
class AudioClip:
    samples: np.ndarray  # (channels, n)
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError("samples must be (channels, n) or (n,)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = s

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    target_rate: int = 16000
    window_ms: float = 41.25
    overlap_fraction: float = 1.0 - 256 / 660
    fft_size: int = 660
    duration_s: float = 4.0
    target_shape: tuple[int, int] | None = (331, 248)
    profile: str = "paper-shape"
    window: str = "hamming"

    def __post_init__(self):
        if not 0.0 < self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in (0, 1)")
        if self.fft_size < self.window_length:
            raise ValueError(f"fft_size {self.fft_size} shorter than window {self.window_length}")
        if self.window not in ("hamming", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @classmethod
    def paper_shape(cls) -> "SpectrogramConfig":
        """660-sample window, hop 256, 660-point FFT: 331x248 for 4 s at 16 kHz."""
        return cls()

    @classmethod
    def faithful(cls) -> "SpectrogramConfig":
        """30 ms window with 50 % overlap: 241x265 for 4 s at 16 kHz."""
        return cls(window_ms=30.0, overlap_fraction=0.5, fft_size=480, target_shape=(241, 265), profile="faithful")

    @classmethod
    def from_profile(cls, profile: str) -> "SpectrogramConfig":
        if profile == "paper-shape":
            return cls.paper_shape()
        if profile == "faithful":
            return cls.faithful()
        raise ValueError(f"unknown spectrogram profile {profile!r}")

    @property
    def window_length(self) -> int:
        return int(round(self.window_ms * self.target_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.window_length * (1.0 - self.overlap_fraction)))

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.target_rate))

    def expected_shape(self) -> tuple[int, int]:
        return self.fft_size // 2 + 1, frame_count(self.num_samples, self.window_length, self.hop_length)


@dataclass
class Spectrogram:
    data: np.ndarray
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def frame_count(n: int, window: int, hop: int) -> int:
    if window > n:
        raise ValueError(f"window of {window} samples longer than signal of {n}")
    return (n - window) // hop + 1


def mixdown(clip: AudioClip) -> AudioClip:
    if clip.num_samples == 0:
        raise ValueError("cannot mix down an empty clip")
    if clip.channels == 1:
        return clip
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc rate conversion; output length floor(n*ratio)."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    ratio = Fraction(target_rate, clip.sample_rate)
    n_out = clip.num_samples * ratio.numerator // ratio.denominator
    if n_out == 0:
        raise ValueError("resampling would produce an empty clip")
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator, axis=1, padtype="line")
    return AudioClip(out[:, :n_out], target_rate)


def fix_duration(clip: AudioClip, duration_s: float) -> AudioClip:
    """Keep the first ``duration_s`` seconds, zero-padding at the end if short."""
    n = int(round(duration_s * clip.sample_rate))
    s = clip.samples
    if s.shape[1] >= n:
        return AudioClip(s[:, :n].copy(), clip.sample_rate)
    out = np.zeros((s.shape[0], n))
    out[:, :s.shape[1]] = s
    return AudioClip(out, clip.sample_rate)


def analysis_window(config: SpectrogramConfig) -> np.ndarray:
    if config.window == "rectangular":
        return np.ones(config.window_length)
    return np.hamming(config.window_length)


def stft(signal: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    """One-sided STFT, (freq_bins, frames)."""
    win = analysis_window(config)
    frame_count(signal.shape[0], win.shape[0], config.hop_length)
    frames = sliding_window_view(signal, win.shape[0])[:: config.hop_length]
    return np.fft.rfft(frames * win, n=config.fft_size, axis=1).T


def log_power_spectrogram(clip: AudioClip, config: SpectrogramConfig) -> Spectrogram:
    if clip.channels != 1:
        raise ValueError("log_power_spectrogram expects a mono clip")
    spec = stft(clip.samples[0], config)
    power = spec.real ** 2 + spec.imag ** 2
    return Spectrogram(np.log(power + LOG_FLOOR), config)


def normalize(spec: Spectrogram) -> Spectrogram:
    """Per-spectrogram z-score; (near-)constant input maps to all zeros."""
    x = np.asarray(spec.data, dtype=np.float64)
    std = float(x.std())
    if std < STD_FLOOR:
        return Spectrogram(np.zeros_like(x), spec.config)
    return Spectrogram((x - x.mean()) / std, spec.config)


def compute_spectrogram(clip: AudioClip, config: SpectrogramConfig | None = None) -> Spectrogram:
    config = config or SpectrogramConfig.paper_shape()
    if clip.num_samples * config.target_rate // clip.sample_rate == 0:
        # nothing survives resampling, so the clip is all padding
        mono = AudioClip(np.zeros((1, 0)), config.target_rate)
    else:
        mono = resample(mixdown(clip), config.target_rate)
    mono = fix_duration(mono, config.duration_s)
    spec = normalize(log_power_spectrogram(mono, config))
    if config.target_shape is not None and spec.shape != tuple(config.target_shape):
        raise ValueError(f"spectrogram shape {spec.shape} != configured {tuple(config.target_shape)}")
    return Spectrogram(spec.data.astype(np.float32), config)


# --------------------------------------------------------------------------- WAV I/O


def read_wav(path: str | Path) -> AudioClip:
    """PCM 8/16/32-bit or IEEE float WAV, any channel count, scaled to [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    x = x.T if x.ndim == 2 else x[None, :]
    return AudioClip(x, int(rate))


def write_wav(path: str | Path, clip: AudioClip, sample_format: str = "pcm16") -> None:
    x = np.clip(clip.samples, -1.0, 1.0).T
    if clip.channels == 1:
        x = x[:, 0]
    if sample_format == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif sample_format == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    wavfile.write(str(path), clip.sample_rate, data)
