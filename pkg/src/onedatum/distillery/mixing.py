"""Batch-mixing augmentations applied to inputs only.

Supervision comes from the teacher's output on the mixed input, so there is
no label mixing here. ``lam`` is the per-sample weight of the original
(base) sample.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from onedatum.errors import PreconditionError, UnsupportedMixError


@dataclass
class MixedBatch:
    inputs: torch.Tensor
    lam: torch.Tensor
    pairing: torch.Tensor
    box: tuple[int, int, int, int] | None = None  # (y1, y2, x1, x2), cutmix only


def _pairing(n: int) -> torch.Tensor:
    # partner = the batch reversed; batches are already shuffled
    return torch.arange(n - 1, -1, -1)


def mixup(batch: torch.Tensor, rng: np.random.Generator, lam=None) -> MixedBatch:
    """Convex combination with the partner from the reversed batch; one ``lam ~ U(0, 1)`` per sample."""
    n = batch.shape[0]
    if n < 2:
        raise PreconditionError("mixup needs a batch of at least 2")
    perm = _pairing(n)
    if lam is None:
        lam = rng.uniform(0.0, 1.0, size=n)
    lam = torch.as_tensor(np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy())
    w = lam.to(batch.dtype).view(-1, *([1] * (batch.dim() - 1)))
    mixed = w * batch + (1 - w) * batch[perm]
    return MixedBatch(mixed, lam, perm)


def cutmix_box(height: int, width: int, lam0: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box with side fractions ``sqrt(1 - lam0)`` around a uniform center, clamped to the image."""
    ratio = np.sqrt(1.0 - lam0)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    y1, y2 = np.clip([cy - cut_h // 2, cy + cut_h // 2], 0, height)
    x1, x2 = np.clip([cx - cut_w // 2, cx + cut_w // 2], 0, width)
    return int(y1), int(y2), int(x1), int(x2)


def cutmix(batch: torch.Tensor, alpha: float, beta: float, rng: np.random.Generator,
           lam0: float | None = None) -> MixedBatch:
    """Paste a random box from the reversed-batch partner into each image.

    ``lam0 ~ Beta(alpha, beta)`` sets the nominal box size; the stored ``lam``
    is recomputed from the clamped box as ``1 - box_area / image_area``.
    """
    if batch.dim() != 4 or batch.shape[-1] != batch.shape[-2]:
        raise UnsupportedMixError(f"cutmix needs square N x C x H x W inputs, got {tuple(batch.shape)}")
    if not (alpha > 0 and beta > 0):
        raise PreconditionError("cutmix alpha and beta must be positive")
    n, _, h, w = batch.shape
    if n < 2:
        raise PreconditionError("cutmix needs a batch of at least 2")
    perm = _pairing(n)
    if lam0 is None:
        lam0 = float(rng.beta(alpha, beta))
    y1, y2, x1, x2 = cutmix_box(h, w, lam0, rng)
    mixed = batch.clone()
    mixed[:, :, y1:y2, x1:x2] = batch[perm, :, y1:y2, x1:x2]
    lam = 1.0 - ((y2 - y1) * (x2 - x1)) / (h * w)
    return MixedBatch(mixed, torch.full((n,), lam, dtype=torch.float64), perm, (y1, y2, x1, x2))


def apply_mix(kind: str, batch: torch.Tensor, rng: np.random.Generator,
              alpha: float = 0.25, beta: float = 0.25) -> torch.Tensor:
    if kind == "none" or batch.shape[0] < 2:
        return batch
    if kind == "mixup":
        return mixup(batch, rng).inputs
    if kind == "cutmix":
        return cutmix(batch, alpha, beta, rng).inputs
    raise PreconditionError(f"unknown mix {kind!r}")
