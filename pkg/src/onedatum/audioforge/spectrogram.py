"""Log-Mel spectrogram front end."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from onedatum.errors import ConfigError, PreconditionError


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = 16_000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    mel_bins: int = 64
    fmin: float = 60.0
    fmax: float | None = None
    n_fft: int = 1024
    eps: float = 1e-6

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ConfigError("need window > hop > 0")
        if self.mel_bins <= 0 or self.sample_rate <= 0:
            raise ConfigError("mel_bins and sample_rate must be positive")
        if self.n_fft < self.window_samples:
            raise ConfigError("n_fft shorter than the analysis window")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def upper_hz(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2

    def num_frames(self, length: int) -> int:
        return (length - self.window_samples) // self.hop_samples + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.mel_bins + 2))
    return edges[1:-1]


@lru_cache(maxsize=16)
def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """``(n_fft // 2 + 1, mel_bins)`` matrix of unnormalized triangular HTK filters."""
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / cfg.sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_hz), cfg.mel_bins + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _window(n: int) -> np.ndarray:
    return np.hanning(n + 1)[:-1]  # periodic Hann


def power_spectrogram(waveform: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Frames x (n_fft // 2 + 1) power spectrum; no padding, so partial frames are dropped."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise PreconditionError("expected a mono waveform")
    win = cfg.window_samples
    if len(x) < win:
        raise PreconditionError(f"waveform of {len(x)} samples shorter than one window ({win})")
    frames = sliding_window_view(x, win)[::cfg.hop_samples]
    spec = np.fft.rfft(frames * _window(win), n=cfg.n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def compute_logmel(waveform: np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """``T x mel_bins`` log-Mel energies, ``log(mel_power + eps)``, float32."""
    mel = power_spectrogram(waveform, cfg) @ mel_filterbank(cfg)
    return np.log(mel + cfg.eps).astype(np.float32)
