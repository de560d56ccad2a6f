"""Distillation objective, teacher-signal adapters, mix augmentations and the training loop."""
from onedatum.distillery.data import (
    ClipLabeledSet,
    ClipSource,
    LabeledSet,
    PatchSource,
    TensorSource,
    as_source,
    evaluate,
    flip_crop,
)
from onedatum.distillery.losses import (
    SignalMode,
    TeacherSignal,
    degrade_signal,
    kd_loss,
    kd_loss_from_probs,
    logit_regression_loss,
    soften,
)
from onedatum.distillery.mixing import MixedBatch, cutmix, mixup
from onedatum.distillery.train import (
    PRESETS,
    DistillConfig,
    DistillResult,
    distill,
    distillation_loss,
    freeze,
    preset,
    read_metrics,
)

__all__ = [
    "ClipLabeledSet", "ClipSource", "LabeledSet", "PatchSource", "TensorSource", "as_source",
    "evaluate", "flip_crop", "SignalMode", "TeacherSignal", "degrade_signal", "kd_loss",
    "kd_loss_from_probs", "logit_regression_loss", "soften", "MixedBatch", "cutmix", "mixup",
    "PRESETS", "DistillConfig", "DistillResult", "distill", "distillation_loss", "freeze",
    "preset", "read_metrics",
]
