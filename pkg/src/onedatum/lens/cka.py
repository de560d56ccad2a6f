"""Linear centered kernel alignment between activation matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from onedatum.errors import PreconditionError


@dataclass
class FeatureMatrix:
    values: np.ndarray  # n examples x d features
    layer: str = ""
    centered: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise PreconditionError("feature matrix must be 2-D (examples x features)")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("feature matrix has non-finite entries")


def _values(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise PreconditionError("feature matrix must be 2-D (examples x features)")
    return arr


def linear_cka(x, y) -> float:
    """``||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)`` with column-centered inputs; 0 if degenerate."""
    x, y = _values(x), _values(y)
    if x.shape[0] != y.shape[0]:
        raise PreconditionError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise PreconditionError("need at least 2 examples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    n = x.shape[0]
    if x.shape[1] * y.shape[1] <= n * n:
        cross = np.linalg.norm(yc.T @ xc) ** 2
        nx = np.linalg.norm(xc.T @ xc)
        ny = np.linalg.norm(yc.T @ yc)
    else:
        # same quantities through the n x n Gram matrices
        kx, ky = xc @ xc.T, yc @ yc.T
        cross = float(np.sum(kx * ky))
        nx, ny = np.linalg.norm(kx), np.linalg.norm(ky)
    denom = nx * ny
    if denom == 0:
        return 0.0
    return float(cross / denom)


_BLOCK_NAMES = ("_ResBlock", "_WideBlock", "_AudioBlock")


def default_taps(model: nn.Module) -> list[str]:
    """Residual/audio blocks in forward order plus the classifier head; plain convs otherwise."""
    names = [n for n, m in model.named_modules() if type(m).__name__ in _BLOCK_NAMES]
    if not names:
        names = [n for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]
    heads = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    return names + heads[-1:]


@torch.no_grad()
def layer_features(model: nn.Module, inputs: torch.Tensor, taps: list[str],
                   batch_size: int = 256) -> dict[str, np.ndarray]:
    """Per-tap activations with spatial dims averaged away, ``n x channels`` each."""
    modules = dict(model.named_modules())
    missing = [t for t in taps if t not in modules]
    if missing:
        raise PreconditionError(f"unknown layers {missing}")
    store: dict[str, list] = {t: [] for t in taps}

    def hook_for(tag):
        def hook(_m, _inp, out):
            out = out.detach().float()
            if out.dim() > 2:
                out = out.flatten(2).mean(dim=2)
            store[tag].append(out.cpu().numpy().astype(np.float64))
        return hook

    handles = [modules[t].register_forward_hook(hook_for(t)) for t in taps]
    was = model.training
    model.eval()
    try:
        for i in range(0, len(inputs), batch_size):
            model(inputs[i:i + batch_size])
    finally:
        model.train(was)
        for h in handles:
            h.remove()
    return {t: np.concatenate(v) for t, v in store.items()}


def cka_heatmap(model_a: nn.Module, model_b: nn.Module, probe_inputs, taps_a=None, taps_b=None,
                batch_size: int = 256) -> tuple[np.ndarray, list[str], list[str]]:
    """Matrix of linear CKA between every tapped layer of ``model_a`` and of ``model_b``."""
    x = torch.as_tensor(probe_inputs)
    taps_a = list(taps_a) if taps_a is not None else default_taps(model_a)
    taps_b = list(taps_b) if taps_b is not None else default_taps(model_b)
    fa = layer_features(model_a, x, taps_a, batch_size)
    fb = layer_features(model_b, x, taps_b, batch_size)
    mat = np.array([[linear_cka(fa[a], fb[b]) for b in taps_b] for a in taps_a])
    return mat, taps_a, taps_b
