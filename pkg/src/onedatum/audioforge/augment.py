"""Waveform augmentations for single-clip dataset generation.

Each operation has the signature ``op(x, sr, rng, **overrides) -> y`` where
``x`` is a mono float waveform. Parameters not given as overrides are drawn
from ``rng`` within the documented range. Outputs keep the input length;
:func:`apply` clips the final result to ``[-1, 1]``.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy import signal
from scipy.ndimage import median_filter

_STFT_FFT = 512
_STFT_HOP = 128


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) >= n:
        return y[:n]
    return np.pad(y, (0, n - len(y)))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def stft(x: np.ndarray, n_fft: int = _STFT_FFT, hop: int = _STFT_HOP) -> np.ndarray:
    """Centered Hann STFT, shape ``(frames, n_fft // 2 + 1)``."""
    win = np.hanning(n_fft + 1)[:-1]
    xp = np.pad(x, n_fft // 2, mode="reflect" if len(x) > n_fft // 2 else "constant")
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop]
    return np.fft.rfft(frames * win, axis=-1)


def istft(spec: np.ndarray, length: int, n_fft: int = _STFT_FFT, hop: int = _STFT_HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = np.hanning(n_fft + 1)[:-1]
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * win
    total = n_fft + hop * (len(frames) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, fr in enumerate(frames):
        out[i * hop:i * hop + n_fft] += fr
        norm[i * hop:i * hop + n_fft] += win ** 2
    out /= np.where(norm > 1e-8, norm, 1.0)
    return _fit_length(out[n_fft // 2:], length)


def phase_vocoder(x: np.ndarray, rate: float, n_fft: int = _STFT_FFT, hop: int = _STFT_HOP) -> np.ndarray:
    """Time-scale by ``1 / rate`` without changing pitch (``rate > 1`` shortens)."""
    spec = stft(x, n_fft, hop)
    steps = np.arange(0, len(spec), rate)
    spec = np.concatenate([spec, np.zeros((2, spec.shape[1]), dtype=spec.dtype)])
    advance = 2 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    phase = np.angle(spec[0])
    out = np.empty((len(steps), spec.shape[1]), dtype=complex)
    for t, step in enumerate(steps):
        i = int(step)
        frac = step - i
        c0, c1 = spec[i], spec[i + 1]
        out[t] = ((1 - frac) * np.abs(c0) + frac * np.abs(c1)) * np.exp(1j * phase)
        dphi = np.angle(c1) - np.angle(c0) - advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + advance + dphi
    return istft(out, int(round(len(x) / rate)), n_fft, hop)


def _resample_to(x: np.ndarray, n: int) -> np.ndarray:
    return signal.resample(x, n) if n != len(x) else x.copy()


def _biquad(x: np.ndarray, b, a) -> np.ndarray:
    return signal.lfilter(np.asarray(b) / a[0], np.asarray(a) / a[0], x)


def _safe_cutoff(fc: float, sr: int) -> float:
    return min(fc, 0.45 * sr)


def lowpass_coeffs(fc: float, sr: int, q: float = 1 / math.sqrt(2)):
    w0 = 2 * math.pi * _safe_cutoff(fc, sr) / sr
    alpha = math.sin(w0) / (2 * q)
    cw = math.cos(w0)
    return [(1 - cw) / 2, 1 - cw, (1 - cw) / 2], [1 + alpha, -2 * cw, 1 - alpha]


def highpass_coeffs(fc: float, sr: int, q: float = 1 / math.sqrt(2)):
    w0 = 2 * math.pi * _safe_cutoff(fc, sr) / sr
    alpha = math.sin(w0) / (2 * q)
    cw = math.cos(w0)
    return [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2], [1 + alpha, -2 * cw, 1 - alpha]


def peaking_coeffs(fc: float, sr: int, gain_db: float, q: float):
    a_lin = 10 ** (gain_db / 40)
    w0 = 2 * math.pi * _safe_cutoff(fc, sr) / sr
    alpha = math.sin(w0) / (2 * q)
    cw = math.cos(w0)
    return ([1 + alpha * a_lin, -2 * cw, 1 - alpha * a_lin],
            [1 + alpha / a_lin, -2 * cw, 1 - alpha / a_lin])


def _log_uniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


# -- operations ---------------------------------------------------------------

def add_background_noise(x, sr, rng, snr_db=None):
    """White noise at an SNR drawn from [5, 30] dB."""
    snr_db = rng.uniform(5, 30) if snr_db is None else snr_db
    noise = rng.standard_normal(len(x))
    target = _rms(x) / (10 ** (snr_db / 20))
    return x + noise * (target / max(_rms(noise), 1e-12))


def change_volume(x, sr, rng, gain=None):
    """Scale by a gain drawn uniformly from [0.25, 4]."""
    gain = rng.uniform(0.25, 4.0) if gain is None else gain
    return gain * x


def clicks(x, sr, rng, rate_hz=None, amplitude=None):
    """Add short decaying noise bursts at 1-5 clicks per second."""
    rate_hz = rng.uniform(1, 5) if rate_hz is None else rate_hz
    amplitude = rng.uniform(0.1, 0.5) if amplitude is None else amplitude
    burst_len = max(1, int(0.002 * sr))
    burst = rng.uniform(-1, 1, burst_len) * np.exp(-np.linspace(0, 5, burst_len))
    y = x.copy()
    period = sr / rate_hz
    start = rng.uniform(0, period)
    for pos in np.arange(start, len(x), period).astype(int):
        seg = y[pos:pos + burst_len]
        seg += amplitude * burst[:len(seg)]
    return y


def clip(x, sr, rng, threshold=None):
    """Hard-clip at a fraction in [0.3, 0.9] of the peak amplitude."""
    threshold = rng.uniform(0.3, 0.9) if threshold is None else threshold
    level = threshold * float(np.max(np.abs(x), initial=0.0))
    return np.clip(x, -level, level)


def _hpss_masks(spec, kernel=31):
    mag = np.abs(spec)
    harm = median_filter(mag, size=(kernel, 1), mode="reflect")
    perc = median_filter(mag, size=(1, kernel), mode="reflect")
    h2, p2 = harm ** 2, perc ** 2
    denom = h2 + p2 + 1e-12
    return h2 / denom, p2 / denom


def harmonic(x, sr, rng):
    """Harmonic component of median-filter source separation."""
    spec = stft(x)
    mh, _ = _hpss_masks(spec)
    return istft(spec * mh, len(x))


def percussive(x, sr, rng):
    """Percussive component of median-filter source separation."""
    spec = stft(x)
    _, mp = _hpss_masks(spec)
    return istft(spec * mp, len(x))


def high_pass_filter(x, sr, rng, cutoff=None):
    """2nd-order high-pass, cutoff log-uniform in [100, 4000] Hz."""
    cutoff = _log_uniform(rng, 100, 4000) if cutoff is None else cutoff
    return _biquad(x, *highpass_coeffs(cutoff, sr))


def low_pass_filter(x, sr, rng, cutoff=None):
    """2nd-order low-pass, cutoff log-uniform in [1000, 8000] Hz (capped below Nyquist)."""
    cutoff = _log_uniform(rng, 1000, 8000) if cutoff is None else cutoff
    return _biquad(x, *lowpass_coeffs(cutoff, sr))


def normalize(x, sr, rng):
    """Scale so the peak absolute value is 1; silence passes through."""
    peak = float(np.max(np.abs(x), initial=0.0))
    return x / peak if peak > 0 else x.copy()


def peaking_equalizer(x, sr, rng, center=None, gain_db=None, q=None):
    center = _log_uniform(rng, 200, 6000) if center is None else center
    gain_db = rng.uniform(-12, 12) if gain_db is None else gain_db
    q = rng.uniform(0.5, 2.0) if q is None else q
    return _biquad(x, *peaking_coeffs(center, sr, gain_db, q))


def pitch_shift(x, sr, rng, semitones=None):
    """Shift pitch by up to 4 semitones: time-stretch, then resample back to length."""
    semitones = rng.uniform(-4, 4) if semitones is None else semitones
    ratio = 2 ** (semitones / 12)
    stretched = phase_vocoder(x, 1 / ratio)
    return _resample_to(stretched, len(x))


def reverb(x, sr, rng, rt60=None, wet=None):
    """Convolve with a synthetic exponentially decaying noise tail (RT60 in [0.1, 0.6] s)."""
    rt60 = rng.uniform(0.1, 0.6) if rt60 is None else rt60
    wet = rng.uniform(0.2, 0.5) if wet is None else wet
    n = max(1, int(rt60 * sr))
    t = np.arange(n) / sr
    ir = rng.standard_normal(n) * np.exp(-6.908 * t / rt60)
    ir[0] = 1.0
    tail = signal.fftconvolve(x, ir)[:len(x)]
    tail *= _rms(x) / max(_rms(tail), 1e-12)
    return (1 - wet) * x + wet * tail


def speed(x, sr, rng, factor=None):
    """Play faster/slower by resampling (pitch changes too), factor in [0.8, 1.2]."""
    factor = rng.uniform(0.8, 1.2) if factor is None else factor
    y = _resample_to(x, max(1, int(round(len(x) / factor))))
    return _fit_length(y, len(x))


def time_stretch(x, sr, rng, rate=None):
    """Phase-vocoder tempo change with rate in [0.8, 1.2]."""
    rate = rng.uniform(0.8, 1.2) if rate is None else rate
    return _fit_length(phase_vocoder(x, rate), len(x))


OPS: dict[str, Callable] = {
    "add-background-noise": add_background_noise,
    "change-volume": change_volume,
    "clicks": clicks,
    "clip": clip,
    "harmonic": harmonic,
    "high-pass-filter": high_pass_filter,
    "low-pass-filter": low_pass_filter,
    "normalize": normalize,
    "peaking-equalizer": peaking_equalizer,
    "percussive": percussive,
    "pitch-shift": pitch_shift,
    "reverb": reverb,
    "speed": speed,
    "time-stretch": time_stretch,
}
OP_NAMES = tuple(OPS)


def apply(op_id: str, x: np.ndarray, sr: int, rng: np.random.Generator, **overrides) -> np.ndarray:
    """Run one augmentation and clip the result to a finite float32 waveform in [-1, 1]."""
    try:
        op = OPS[op_id]
    except KeyError:
        raise ValueError(f"unknown augmentation {op_id!r}") from None
    y = op(np.asarray(x, dtype=np.float64), sr, rng, **overrides)
    y = np.nan_to_num(y, nan=0.0, posinf=1.0, neginf=-1.0)
    return np.clip(y, -1.0, 1.0).astype(np.float32)
