"""Augmented audio datasets from a single recording, and log-Mel features."""
from onedatum.audioforge.augment import OP_NAMES, OPS, apply
from onedatum.audioforge.clips import (
    ClipDataset,
    SourceClip,
    clip_segments,
    evaluate_clip,
    generate_clip,
    generate_clip_dataset,
    load_clip_dataset,
    load_source_clip,
    training_view,
)
from onedatum.audioforge.spectrogram import SpectrogramConfig, compute_logmel, mel_filterbank

__all__ = [
    "OP_NAMES", "OPS", "apply", "ClipDataset", "SourceClip", "clip_segments", "evaluate_clip",
    "generate_clip", "generate_clip_dataset", "load_clip_dataset", "load_source_clip",
    "training_view", "SpectrogramConfig", "compute_logmel", "mel_filterbank",
]
