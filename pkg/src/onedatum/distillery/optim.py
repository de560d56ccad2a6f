"""Optimizer and learning-rate schedule construction."""
from __future__ import annotations

import bisect
import math

import torch

from onedatum.errors import ConfigError

OPTIMIZERS = ("adam", "adamw", "sgd")
SCHEDULES = ("constant", "cosine", "piecewise")


def build_optimizer(params, name: str, lr: float, weight_decay: float = 0.0,
                    momentum: float = 0.9, nesterov: bool = False) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, nesterov=nesterov,
                               weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}; choose from {OPTIMIZERS}")


def lr_multiplier(schedule: str, total_steps: int, base_lr: float, warmup_steps: int = 0,
                  milestones=(), values=()):
    """Return ``f(step) -> multiplier of base_lr``.

    ``piecewise`` uses ``values[i]`` after ``i`` milestones have passed, so
    ``len(values) == len(milestones) + 1``.
    """
    if schedule == "constant":
        def f(step):
            return min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
    elif schedule == "cosine":
        def f(step):
            if warmup_steps and step < warmup_steps:
                return (step + 1) / warmup_steps
            span = max(1, total_steps - warmup_steps)
            progress = min(1.0, (step - warmup_steps) / span)
            return 0.5 * (1.0 + math.cos(math.pi * progress))
    elif schedule == "piecewise":
        milestones, values = list(milestones), list(values)
        if len(values) != len(milestones) + 1:
            raise ConfigError("piecewise schedule needs len(values) == len(milestones) + 1")
        if milestones != sorted(milestones):
            raise ConfigError("piecewise milestones must be increasing")

        def f(step):
            return values[bisect.bisect_right(milestones, step)] / base_lr
    else:
        raise ConfigError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
    return f


def build_scheduler(optimizer, schedule: str, total_steps: int, base_lr: float, **kw):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lr_multiplier(schedule, total_steps, base_lr, **kw))
