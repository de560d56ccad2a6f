"""Supervised teacher training on labeled data."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from onedatum.audioforge.clips import training_view
from onedatum.audioforge.spectrogram import SpectrogramConfig, compute_logmel
from onedatum.distillery.data import evaluate, flip_crop, images_to_tensor
from onedatum.distillery.optim import build_optimizer, build_scheduler
from onedatum.distillery.train import _append_record, _truncate_metrics
from onedatum.errors import ConfigError, PreconditionError, TrainingDivergedError
from onedatum.modelzoo import save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 5e-4
    schedule: str = "piecewise"
    lr_milestones: tuple[int, ...] = (400, 32_000, 48_000)
    lr_values: tuple[float, ...] = (0.01, 0.1, 0.01, 0.001)
    total_steps: int = 64_000
    steps_per_epoch: int = 2000
    batch_size: int = 128
    cutout: int = 16
    standard_aug: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("total_steps >= 0, steps_per_epoch >= 1 and batch_size >= 1 required")
        if self.cutout < 0:
            raise ConfigError("cutout must be >= 0")

    def replace(self, **kw) -> "TeacherConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherConfig":
        d = dict(d)
        for key in ("lr_milestones", "lr_values"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown teacher options {sorted(unknown)}")
        return cls(**d)


TEACHER_PRESETS = {
    "resnet-vgg": TeacherConfig(),
    "wideresnet": TeacherConfig(nesterov=True, lr=0.1, lr_milestones=(24_000, 48_000, 64_000),
                                lr_values=(0.1, 0.02, 0.004, 0.0008), total_steps=80_000),
    "audio": TeacherConfig(optimizer="adam", lr=1e-3, weight_decay=0.0, schedule="constant",
                           lr_milestones=(), lr_values=(), total_steps=30_000, cutout=0,
                           standard_aug=False),
}
PILOT_FRACTION = 0.25


def preset_for_family(family: str) -> str:
    return {"wideresnet": "wideresnet", "audio-cnn": "audio"}.get(family, "resnet-vgg")


def teacher_preset(name: str, budget: str = "paper", **overrides) -> TeacherConfig:
    """Preset schedule; the pilot budget compresses every step count by ``PILOT_FRACTION``."""
    try:
        cfg = TEACHER_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown teacher preset {name!r}; choose from {sorted(TEACHER_PRESETS)}") from None
    if budget == "pilot":
        scale = PILOT_FRACTION
        cfg = cfg.replace(total_steps=int(cfg.total_steps * scale),
                          lr_milestones=tuple(int(m * scale) for m in cfg.lr_milestones),
                          steps_per_epoch=int(cfg.steps_per_epoch * scale))
    elif budget != "paper":
        raise ConfigError(f"budget must be pilot or paper, got {budget!r}")
    return cfg.replace(**overrides)


def cutout(x: torch.Tensor, size: int, rng: np.random.Generator) -> torch.Tensor:
    """Zero one ``size x size`` square per sample, centered anywhere (clipped at the borders)."""
    if size <= 0:
        return x
    n, _, h, w = x.shape
    cy, cx = rng.integers(0, h, n), rng.integers(0, w, n)
    x = x.clone()
    for i in range(n):
        y0, y1 = max(0, cy[i] - size // 2), min(h, cy[i] + size - size // 2)
        x0, x1 = max(0, cx[i] - size // 2), min(w, cx[i] + size - size // 2)
        x[i, :, y0:y1, x0:x1] = 0
    return x


class SupervisedImages:
    def __init__(self, images: np.ndarray, labels: np.ndarray, cfg: TeacherConfig):
        if len(images) != len(labels):
            raise PreconditionError("images and labels differ in length")
        self.images, self.labels, self.cfg = images, np.asarray(labels, dtype=np.int64), cfg

    def __len__(self):
        return len(self.labels)

    def batch(self, idx, rng):
        x = images_to_tensor(self.images[idx])
        if self.cfg.standard_aug:
            x = flip_crop(x, rng)
        x = cutout(x, self.cfg.cutout, rng)
        return x, torch.from_numpy(self.labels[idx])


class SupervisedClips:
    def __init__(self, clips, labels: np.ndarray, spec_cfg: SpectrogramConfig = SpectrogramConfig()):
        self.clips, self.labels, self.spec_cfg = clips, np.asarray(labels, dtype=np.int64), spec_cfg

    def __len__(self):
        return len(self.labels)

    def batch(self, idx, rng):
        feats = [compute_logmel(training_view(self.clips[i], rng, self.spec_cfg.sample_rate), self.spec_cfg)
                 for i in idx]
        return torch.from_numpy(np.stack(feats)).unsqueeze(1), torch.from_numpy(self.labels[idx])


def _epoch_batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def train_supervised(model, data, cfg: TeacherConfig, sink=None, eval_set=None, resume: bool = True) -> list[dict]:
    """Cross-entropy training for ``cfg.total_steps`` steps, logged every ``steps_per_epoch``.

    With a ``sink``, ``metrics.log`` and ``checkpoints/{last,teacher}.pt``
    are written and an existing ``last.pt`` is resumed from.
    """
    sink = Path(sink) if sink is not None else None
    ckpt_dir = metrics_path = None
    if sink is not None:
        ckpt_dir = sink / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = sink / "metrics.log"
    params = [p for p in model.parameters() if p.requires_grad]
    base_lr = cfg.lr_values[0] if cfg.schedule == "piecewise" and cfg.lr_values else cfg.lr
    optimizer = build_optimizer(params, cfg.optimizer, base_lr, cfg.weight_decay, cfg.momentum, cfg.nesterov)
    scheduler = build_scheduler(optimizer, cfg.schedule, cfg.total_steps, base_lr,
                                milestones=cfg.lr_milestones, values=cfg.lr_values)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    step, history, torch_state = 0, [], None
    last_path = ckpt_dir / "last.pt" if ckpt_dir is not None else None
    if resume and last_path is not None and last_path.exists():
        state = torch.load(last_path, map_location="cpu", weights_only=False)
        model.load_state_dict(state["state_dict"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        rng.bit_generator.state = state["rng"]
        torch_state, step, history = state["torch_rng"], state["step"], state["history"]
        _truncate_metrics(metrics_path, state["epoch"])

    reg = getattr(model, "regularization_loss", None)
    batches = _epoch_batches(len(data), cfg.batch_size, rng)
    with torch.random.fork_rng(devices=[]):
        if torch_state is not None:
            torch.set_rng_state(torch_state)
        else:
            torch.manual_seed(cfg.seed)
        while step < cfg.total_steps:
            t0, running, seen = time.time(), 0.0, 0
            epoch = step // cfg.steps_per_epoch
            model.train()
            stop = min(cfg.total_steps, (epoch + 1) * cfg.steps_per_epoch)
            while step < stop:
                x, y = data.batch(next(batches), rng)
                loss = F.cross_entropy(model(x), y)
                if not torch.isfinite(loss):
                    _append_record(metrics_path, {"event": "diverged", "epoch": epoch, "step": step})
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                r = reg() if reg is not None else None
                total = loss + r if r is not None else loss
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                scheduler.step()
                step += 1
                running += float(loss.detach()) * len(y)
                seen += len(y)
            record = {"epoch": epoch, "train_loss": running / max(seen, 1), "val_top1": None,
                      "lr": optimizer.param_groups[0]["lr"], "step": step}
            if eval_set is not None:
                record["val_top1"] = evaluate(model, eval_set)["top1"]
            record["wall_seconds"] = time.time() - t0
            history.append(record)
            _append_record(metrics_path, record)
            log.info("teacher epoch %d loss %.4f val_top1 %s", epoch, record["train_loss"], record["val_top1"])
            if ckpt_dir is not None:
                torch.save({"state_dict": model.state_dict(), "optimizer": optimizer.state_dict(),
                            "scheduler": scheduler.state_dict(), "rng": rng.bit_generator.state,
                            "torch_rng": torch.get_rng_state(), "epoch": epoch, "step": step,
                            "history": history}, ckpt_dir / "last.tmp")
                (ckpt_dir / "last.tmp").replace(last_path)
    if ckpt_dir is not None:
        final = {"steps": step, "config": cfg.to_dict()}
        if eval_set is not None:
            final["val_top1"] = history[-1]["val_top1"] if history else evaluate(model, eval_set)["top1"]
        save_checkpoint(ckpt_dir / "teacher.pt", model, final)
    return history
