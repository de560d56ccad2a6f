"""Function-matching distillation loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from onedatum.distillery import losses
from onedatum.distillery.data import as_source, evaluate
from onedatum.distillery.mixing import apply_mix
from onedatum.distillery.optim import OPTIMIZERS, SCHEDULES, build_optimizer, build_scheduler
from onedatum.errors import ConfigError, PreconditionError, TrainingDivergedError
from onedatum.modelzoo import save_checkpoint, state_digest

log = logging.getLogger(__name__)

LOSS_KINDS = ("kl", "l1", "l2")
MIX_KINDS = ("none", "mixup", "cutmix")
METRICS_NAME = "metrics.log"
CHECKPOINT_DIR = "checkpoints"


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 8.0
    loss_kind: str = "kl"
    signal_mode: str = "full"
    topk_renorm: bool = True
    mix: str = "cutmix"
    cutmix_alpha: float = 0.25
    cutmix_beta: float = 0.25
    standard_aug: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    nesterov: bool = False
    schedule: str = "constant"
    warmup_epochs: float = 0.0
    lr_milestones: tuple[int, ...] = ()
    lr_values: tuple[float, ...] = ()
    epochs: int = 30
    batch_size: int = 512
    max_steps: int | None = None
    seed: int = 0
    eval_every: int = 1
    log_per_class: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        mode = losses.SignalMode.parse(self.signal_mode)
        if self.loss_kind != "kl" and mode.kind != "full":
            raise ConfigError("l1/l2 logit regression needs the full teacher signal")
        if self.mix not in MIX_KINDS:
            raise ConfigError(f"mix must be one of {MIX_KINDS}")
        if self.mix == "cutmix" and not (self.cutmix_alpha > 0 and self.cutmix_beta > 0):
            raise ConfigError("cutmix alpha and beta must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def signal(self) -> losses.SignalMode:
        return losses.SignalMode.parse(self.signal_mode)

    def replace(self, **kw) -> "DistillConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        for key in ("lr_milestones", "lr_values"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown distill options {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # single-GPU CIFAR/audio recipe: Adam, fixed lr, batch 512
    "small-scale": DistillConfig(),
    # 224px recipe: AdamW, lr 0.01, wd 1e-4, cosine, CutMix(1, 1)
    "large-scale": DistillConfig(optimizer="adamw", lr=0.01, weight_decay=1e-4, schedule="cosine",
                                 cutmix_alpha=1.0, cutmix_beta=1.0),
    "audio": DistillConfig(mix="mixup", standard_aug=False),
}


def preset(name: str, **overrides) -> DistillConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown distill preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


def distillation_loss(teacher_logits, student_logits, cfg: DistillConfig) -> torch.Tensor:
    if cfg.loss_kind == "kl":
        if cfg.signal.kind == "full":
            return losses.kd_loss(teacher_logits, student_logits, cfg.temperature)
        probs = losses.soften(teacher_logits, cfg.temperature)
        signal = losses.degrade_signal(probs, cfg.signal, renormalize=cfg.topk_renorm)
        return losses.kd_loss_from_probs(signal.probs, student_logits, cfg.temperature)
    return losses.logit_regression_loss(teacher_logits, student_logits, cfg.temperature, cfg.loss_kind)


@dataclass
class DistillResult:
    student: torch.nn.Module
    history: list = field(default_factory=list)
    teacher_digest: str = ""
    steps: int = 0


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    """Inference mode with no trainable parameters; normalization statistics stay fixed."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _num_steps(n: int, batch_size: int) -> int:
    return max(1, n // batch_size) if n >= batch_size else 1


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    if n < batch_size:
        yield order
        return
    for i in range(_num_steps(n, batch_size)):
        yield order[i * batch_size:(i + 1) * batch_size]


def _append_record(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _truncate_metrics(path: Path, last_epoch: int) -> None:
    if not path.exists():
        return
    keep = [r for r in read_metrics(path) if r.get("epoch", -1) <= last_epoch and "event" not in r]
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in keep))


def _check_heads(teacher, student, source) -> None:
    x = source.batch(np.arange(min(2, len(source))), np.random.default_rng(0), train=False)
    was = student.training
    student.eval()
    with torch.no_grad():
        t_out, s_out = teacher(x), student(x)
    student.train(was)
    if t_out.shape[-1] != s_out.shape[-1]:
        raise PreconditionError(f"teacher has {t_out.shape[-1]} outputs, student {s_out.shape[-1]}")


def distill(teacher: torch.nn.Module, student: torch.nn.Module, data, cfg: DistillConfig,
            sink=None, eval_set=None, callbacks=(), resume: bool = True) -> DistillResult:
    """Train ``student`` to match ``teacher`` on ``data``.

    Each step draws a batch, applies flip/crop (images) and the configured
    mix, feeds that one tensor to both networks, and updates the student
    only. With a ``sink`` directory, one metrics record per epoch goes to
    ``metrics.log`` and ``checkpoints/{last,best}.pt`` are kept; an existing
    ``last.pt`` is resumed from.

    ``callbacks`` may define ``on_step_end(student, step)``.
    """
    source = as_source(data, cfg.standard_aug)
    if len(source) == 0:
        raise PreconditionError("empty training data")
    freeze(teacher)
    _check_heads(teacher, student, source)
    teacher_digest = state_digest(teacher)

    sink = Path(sink) if sink is not None else None
    metrics_path = ckpt_dir = None
    if sink is not None:
        ckpt_dir = sink / CHECKPOINT_DIR
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = sink / METRICS_NAME

    steps_per_epoch = _num_steps(len(source), cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    params = [p for p in student.parameters() if p.requires_grad]
    optimizer = build_optimizer(params, cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum, cfg.nesterov)
    scheduler = build_scheduler(optimizer, cfg.schedule, total_steps, cfg.lr,
                                warmup_steps=int(cfg.warmup_epochs * steps_per_epoch),
                                milestones=cfg.lr_milestones, values=cfg.lr_values)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    torch_gen_state = None
    start_epoch, step, best = 0, 0, -math.inf
    history: list[dict] = []

    last_path = ckpt_dir / "last.pt" if ckpt_dir is not None else None
    if resume and last_path is not None and last_path.exists():
        state = torch.load(last_path, map_location="cpu", weights_only=False)
        student.load_state_dict(state["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        rng.bit_generator.state = state["rng"]
        torch_gen_state = state["torch_rng"]
        start_epoch, step, best = state["epoch"] + 1, state["step"], state["best"]
        history = state["history"]
        _truncate_metrics(metrics_path, state["epoch"])
        for cb in callbacks:
            if hasattr(cb, "on_step_end"):
                cb.on_step_end(student, step)
        log.info("resuming from epoch %d", start_epoch)

    reg = getattr(student, "regularization_loss", None)
    with torch.random.fork_rng(devices=[]):
        if torch_gen_state is not None:
            torch.set_rng_state(torch_gen_state)
        else:
            torch.manual_seed(cfg.seed)
        for epoch in range(start_epoch, cfg.epochs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            t0 = time.time()
            student.train()
            running, seen = 0.0, 0
            for idx in _batches(len(source), cfg.batch_size, rng):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                x = source.batch(idx, rng, train=True)
                x = apply_mix(cfg.mix, x, rng, cfg.cutmix_alpha, cfg.cutmix_beta)
                teacher.eval()
                with torch.no_grad():
                    t_logits = teacher(x)
                s_logits = student(x)
                loss = distillation_loss(t_logits, s_logits, cfg)
                if not torch.isfinite(loss):
                    _append_record(metrics_path, {"event": "diverged", "epoch": epoch, "step": step,
                                                  "loss": float(loss.detach())})
                    raise TrainingDivergedError(f"non-finite loss {float(loss.detach())} at epoch {epoch}, step {step}")
                total = loss
                if reg is not None and (r := reg()) is not None:
                    total = loss + r
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                scheduler.step()
                step += 1
                for cb in callbacks:
                    if hasattr(cb, "on_step_end"):
                        cb.on_step_end(student, step)
                running += float(loss.detach()) * len(idx)
                seen += len(idx)

            record = {
                "epoch": epoch,
                "train_loss": running / max(seen, 1),
                "val_top1": None,
                "lr": optimizer.param_groups[0]["lr"],
                "step": step,
            }
            if eval_set is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
                ev = evaluate(student, eval_set)
                record["val_top1"] = ev["top1"]
                if cfg.log_per_class:
                    record["per_class_top1"] = ev["per_class"]
            record["wall_seconds"] = time.time() - t0
            history.append(record)
            _append_record(metrics_path, record)
            log.info("epoch %d loss %.5f val_top1 %s", epoch, record["train_loss"], record["val_top1"])

            if ckpt_dir is not None:
                score = record["val_top1"] if record["val_top1"] is not None else -record["train_loss"]
                if score > best:
                    best = score
                    save_checkpoint(ckpt_dir / "best.pt", student, {"epoch": epoch, **record})
                torch.save({
                    "state_dict": student.state_dict(), "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict(), "rng": rng.bit_generator.state,
                    "torch_rng": torch.get_rng_state(), "epoch": epoch, "step": step,
                    "best": best, "history": history,
                }, ckpt_dir / "last.tmp")
                (ckpt_dir / "last.tmp").replace(last_path)

    if state_digest(teacher) != teacher_digest:
        raise RuntimeError("teacher parameters or normalization statistics changed during distillation")
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "student.pt", student, {"config": cfg.to_dict(), "steps": step})
    return DistillResult(student, history, teacher_digest, step)
