"""GIST scene descriptor: Gabor energies pooled on a coarse spatial grid.

The filter bank follows the log-polar frequency-domain construction of the
original descriptor; the whitening / local contrast prefilter is omitted
(only the mean is removed).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image
from scipy import fft as sfft
from scipy.signal import find_peaks
from scipy.spatial.distance import pdist

from onedatum.errors import PreconditionError


@dataclass(frozen=True)
class GistConfig:
    scales: int = 4
    orientations: int = 8
    grid: int = 4
    image_size: int = 256

    @property
    def length(self) -> int:
        return self.scales * self.orientations * self.grid * self.grid


@lru_cache(maxsize=4)
def gabor_bank(cfg: GistConfig) -> np.ndarray:
    """``(scales * orientations, S, S)`` transfer functions in unshifted FFT layout."""
    s = cfg.image_size
    fx, fy = np.meshgrid(np.arange(-s // 2, s // 2), np.arange(-s // 2, s // 2))
    fr = np.fft.fftshift(np.sqrt(fx ** 2 + fy ** 2))
    theta = np.fft.fftshift(np.arctan2(fy, fx))
    bank = []
    for sc in range(cfg.scales):
        peak = 0.3 / (1.85 ** sc)
        for o in range(cfg.orientations):
            angle = np.pi / cfg.orientations * o
            tr = theta + angle
            tr = tr + 2 * np.pi * (tr < -np.pi) - 2 * np.pi * (tr > np.pi)
            g = np.exp(-10 * 0.35 * (fr / s / peak - 1) ** 2
                       - 2 * (16 * cfg.orientations ** 2 / 32 ** 2) * np.pi * tr ** 2)
            bank.append(g)
    out = np.stack(bank)
    out.setflags(write=False)
    return out


def _prepare(image, size: int) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3):
        raise PreconditionError(f"expected an image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        # bring any bit depth to the 8-bit grid; floats are taken as [0, 1]
        top = np.iinfo(arr.dtype).max if np.issubdtype(arr.dtype, np.integer) else 1.0
        arr = np.clip(np.rint(arr.astype(np.float64) * (255.0 / top)), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr)
    if im.mode != "L":
        im = im.convert("L")
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    gray = np.asarray(im, dtype=np.float64) / 255.0
    return gray - gray.mean()


def gist_descriptor(image, cfg: GistConfig = GistConfig(), normalize: bool = False) -> np.ndarray:
    """Length ``scales * orientations * grid**2`` descriptor (512 by default)."""
    gray = _prepare(image, cfg.image_size)
    spectrum = sfft.fft2(gray)
    responses = np.abs(sfft.ifft2(spectrum[None] * gabor_bank(cfg), axes=(-2, -1)))
    g, s = cfg.grid, cfg.image_size
    edges = np.linspace(0, s, g + 1).astype(int)
    pooled = np.empty((responses.shape[0], g, g))
    for i in range(g):
        for j in range(g):
            pooled[:, i, j] = responses[:, edges[i]:edges[i + 1], edges[j]:edges[j + 1]].mean(axis=(1, 2))
    desc = pooled.reshape(-1)
    return l2_normalize(desc) if normalize else desc


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def gist_distances(images, cfg: GistConfig = GistConfig()) -> np.ndarray:
    """All ``m (m - 1) / 2`` Euclidean distances between L2-normalized descriptors."""
    if len(images) < 2:
        raise PreconditionError("need at least 2 images")
    feats = np.stack([gist_descriptor(im, cfg, normalize=True) for im in images])
    return pdist(feats)


def gist_distance_histogram(images, cfg: GistConfig = GistConfig(), bins: int = 50):
    """Histogram of pairwise GIST distances over ``[0, 2]``; returns ``(counts, edges, distances)``."""
    d = gist_distances(images, cfg)
    counts, edges = np.histogram(d, bins=bins, range=(0.0, 2.0))
    return counts, edges, d


def count_modes(counts, min_prominence: float = 0.1, smooth: int = 3) -> int:
    """Number of histogram peaks whose prominence is at least ``min_prominence`` of the tallest bin."""
    c = np.asarray(counts, dtype=np.float64)
    if smooth > 1:
        c = np.convolve(c, np.ones(smooth) / smooth, mode="same")
    padded = np.concatenate([[0.0], c, [0.0]])
    peaks, _ = find_peaks(padded, prominence=min_prominence * padded.max())
    return len(peaks)
