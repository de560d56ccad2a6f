"""Data-free compression: magnitude pruning and 8-bit weight quantization,
recovered by self-distillation on generated patches."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch.nn.utils import parametrize

from onedatum.distillery.train import DistillConfig, distill
from onedatum.errors import ConfigError

PAPER_SPARSITIES = (0.25, 0.5, 0.75, 0.85)
QMAX = 127


@dataclass(frozen=True)
class CompressionPlan:
    method: str = "prune"
    sparsity: float = 0.5
    bit_width: int = 8
    finetune: DistillConfig = field(default_factory=lambda: DistillConfig(epochs=0))

    def __post_init__(self):
        if self.method not in ("prune", "quantize"):
            raise ConfigError(f"method must be prune or quantize, got {self.method!r}")
        if not 0 <= self.sparsity < 1:
            raise ConfigError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.bit_width != 8:
            raise ConfigError("only 8-bit quantization is supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def prunable(model: nn.Module):
    """``(name, module)`` pairs whose weights are pruned/quantized: convolutions and linear layers."""
    return [(n, m) for n, m in model.named_modules() if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Linear))]


def magnitude_mask(weight: torch.Tensor, sparsity: float) -> torch.Tensor:
    """Mask zeroing exactly ``floor(sparsity * n)`` lowest-magnitude entries (ties: lower flat index first)."""
    if not 0 <= sparsity < 1:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    flat = weight.detach().abs().flatten()
    k = math.floor(sparsity * flat.numel())
    mask = torch.ones_like(flat)
    if k:
        order = torch.argsort(flat, stable=True)
        mask[order[:k]] = 0
    return mask.view_as(weight)


def magnitude_prune(model: nn.Module, sparsity: float) -> tuple[nn.Module, dict[str, torch.Tensor]]:
    """Zero the smallest weights of every conv/linear tensor in place; biases and norms are exempt."""
    masks = {}
    with torch.no_grad():
        for name, m in prunable(model):
            mask = magnitude_mask(m.weight, sparsity)
            m.weight.mul_(mask)
            masks[name] = mask
    return model, masks


class MaskEnforcer:
    """Training callback that re-applies pruning masks after every optimizer step."""

    def __init__(self, model: nn.Module, masks: dict[str, torch.Tensor]):
        modules = dict(model.named_modules())
        self.pairs = [(modules[n], mask) for n, mask in masks.items()]

    def on_step_end(self, model, step):
        with torch.no_grad():
            for m, mask in self.pairs:
                m.weight.mul_(mask)


def quantize_tensor(w: torch.Tensor) -> tuple[torch.Tensor, float]:
    """Symmetric per-tensor int8: ``scale = max|w| / 127``; an all-zero tensor gets scale 1."""
    peak = float(w.detach().abs().max()) if w.numel() else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    q = torch.clamp(torch.round(w.detach() / scale), -QMAX, QMAX).to(torch.int8)
    return q, scale


def dequantize(q: torch.Tensor, scale: float, dtype=torch.float32) -> torch.Tensor:
    return q.to(dtype) * scale


def quantize_8bit(model: nn.Module) -> tuple[nn.Module, dict[str, float]]:
    """Replace conv/linear weights by their int8 reconstruction in place; returns per-tensor scales."""
    scales = {}
    with torch.no_grad():
        for name, m in prunable(model):
            q, scale = quantize_tensor(m.weight)
            m.weight.copy_(dequantize(q, scale, m.weight.dtype))
            scales[name] = scale
    return model, scales


class FakeQuant(nn.Module):
    """Weight parametrization: int8 round-trip in the forward pass, identity gradient."""

    def forward(self, w):
        peak = w.detach().abs().max()
        scale = torch.where(peak > 0, peak / QMAX, torch.ones_like(peak))
        q = torch.clamp(torch.round(w / scale), -QMAX, QMAX) * scale
        return w + (q - w).detach()


def compress_with_self_distillation(pretrained: nn.Module, plan: CompressionPlan, patches=None,
                                    sink=None, eval_set=None) -> tuple[nn.Module, dict]:
    """Compress a clone of ``pretrained`` and fine-tune it against the uncompressed original.

    Returns the compressed student and a dict with ``masks`` (prune) or
    ``scales`` (quantize) plus the distillation ``history``.
    """
    teacher = copy.deepcopy(pretrained)
    student = copy.deepcopy(pretrained).requires_grad_(True)
    finetune = plan.finetune
    info: dict = {"plan": plan.to_dict(), "history": []}
    run = (patches is not None and finetune.epochs > 0
           and (finetune.max_steps is None or finetune.max_steps > 0))

    if plan.method == "prune":
        _, masks = magnitude_prune(student, plan.sparsity)
        info["masks"] = masks
        if run:
            result = distill(teacher, student, patches, finetune, sink=sink, eval_set=eval_set,
                             callbacks=[MaskEnforcer(student, masks)])
            info["history"] = result.history
        return student, info

    if run:
        for _, m in prunable(student):
            parametrize.register_parametrization(m, "weight", FakeQuant())
        try:
            result = distill(teacher, student, patches, finetune, sink=sink, eval_set=eval_set)
            info["history"] = result.history
        finally:
            for _, m in prunable(student):
                if parametrize.is_parametrized(m, "weight"):
                    parametrize.remove_parametrizations(m, "weight", leave_parametrized=True)
    _, scales = quantize_8bit(student)
    info["scales"] = scales
    return student, info
