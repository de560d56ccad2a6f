"""Distillation objectives and teacher-signal adapters.

The KL objective is used as written, without the ``tau**2`` gradient
rescaling of the classic formulation: there is no supervised term to balance
it against. Its gradient with respect to the student logits is therefore
``(p_student - p_teacher) / tau``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from onedatum.errors import ConfigError, PreconditionError


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise PreconditionError(f"logit shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def soften(logits, tau: float) -> torch.Tensor:
    """Temperature-flattened probabilities ``softmax(logits / tau)`` over the last axis."""
    _check_tau(tau)
    return torch.softmax(_as_tensor(logits) / tau, dim=-1)


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_sample.mean() if per_sample.dim() else per_sample
    if reduction == "sum":
        return per_sample.sum()
    if reduction == "none":
        return per_sample
    raise ConfigError(f"unknown reduction {reduction!r}")


def kd_loss_from_probs(teacher_probs, student_logits, tau: float, reduction: str = "mean") -> torch.Tensor:
    """``KL(teacher_probs || softmax(student_logits / tau))`` summed over classes.

    ``teacher_probs`` may have exact zeros (degraded signals); ``0 log 0`` is 0.
    """
    _check_tau(tau)
    pt, s = _as_tensor(teacher_probs), _as_tensor(student_logits)
    _check_pair(pt, s)
    log_ps = F.log_softmax(s / tau, dim=-1)
    per_sample = (torch.xlogy(pt, pt) - pt * log_ps).sum(dim=-1)
    return _reduce(per_sample, reduction)


def kd_loss(teacher_logits, student_logits, tau: float, reduction: str = "mean") -> torch.Tensor:
    """KL divergence between teacher and student, both softened at ``tau``."""
    _check_tau(tau)
    t, s = _as_tensor(teacher_logits), _as_tensor(student_logits)
    _check_pair(t, s)
    # both sides in log space, so equal logits give exactly zero
    log_pt = F.log_softmax(t / tau, dim=-1)
    log_ps = F.log_softmax(s / tau, dim=-1)
    per_sample = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    return _reduce(per_sample, reduction)


def logit_regression_loss(teacher_logits, student_logits, tau: float, kind: str = "l2") -> torch.Tensor:
    """Mean absolute (``l1``) or squared (``l2``) difference of temperature-scaled logits."""
    _check_tau(tau)
    t, s = _as_tensor(teacher_logits), _as_tensor(student_logits)
    _check_pair(t, s)
    diff = (t - s) / tau
    if kind == "l1":
        return diff.abs().mean()
    if kind == "l2":
        return diff.pow(2).mean()
    raise ConfigError(f"unknown regression loss {kind!r}")


@dataclass(frozen=True)
class SignalMode:
    kind: str  # "full" | "top_k" | "hard"
    k: int | None = None

    @classmethod
    def parse(cls, mode) -> "SignalMode":
        if isinstance(mode, SignalMode):
            return mode
        if isinstance(mode, tuple):
            kind, k = mode
            mode = f"top{k}" if kind in ("top_k", "topk") else kind
        text = str(mode).lower().replace("_", "").replace("-", "")
        if text == "full":
            return cls("full")
        if text == "hard":
            return cls("hard")
        if m := re.fullmatch(r"top(?:k)?(\d+)", text):
            k = int(m[1])
            if k < 1:
                raise ConfigError("top-k needs k >= 1")
            return cls("top_k", k)
        raise ConfigError(f"unknown signal mode {mode!r}; use full, hard or top<k>")

    def __str__(self):
        return f"top{self.k}" if self.kind == "top_k" else self.kind


@dataclass
class TeacherSignal:
    mode: SignalMode
    probs: torch.Tensor


def degrade_signal(full_probs, mode="full", renormalize: bool = True) -> TeacherSignal:
    """Reduce teacher probabilities to ``full``, ``top<k>`` or ``hard`` fidelity.

    ``top<k>`` keeps the k largest entries (ties go to the lower class index)
    and, with ``renormalize``, rescales them to sum to one. ``hard`` is the
    one-hot argmax.
    """
    mode = SignalMode.parse(mode)
    p = _as_tensor(full_probs)
    num_classes = p.shape[-1]
    if mode.kind == "full":
        return TeacherSignal(mode, p)
    if mode.kind == "hard":
        return TeacherSignal(mode, F.one_hot(p.argmax(dim=-1), num_classes).to(p.dtype))
    if mode.k > num_classes:
        raise ConfigError(f"top-{mode.k} requested but only {num_classes} classes")
    order = torch.argsort(-p, dim=-1, stable=True)[..., :mode.k]
    kept = torch.zeros_like(p).scatter(-1, order, p.gather(-1, order))
    if renormalize:
        kept = kept / kept.sum(dim=-1, keepdim=True).clamp_min(torch.finfo(p.dtype).tiny)
    return TeacherSignal(mode, kept)
