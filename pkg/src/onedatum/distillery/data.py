"""Input sources for training and labeled sets for evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from onedatum.audioforge.clips import ClipDataset, evaluate_clip, training_view
from onedatum.audioforge.spectrogram import SpectrogramConfig, compute_logmel


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``N x H x W x C`` -> float32 ``N x C x H x W`` in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)


def flip_crop(x: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Random horizontal flip and random crop from a zero-padded copy, per sample."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out


class PatchSource:
    """Generated image patches as student/teacher inputs."""

    def __init__(self, records: np.ndarray, standard_aug: bool = True):
        self.records = records
        self.standard_aug = standard_aug

    def __len__(self):
        return len(self.records)

    def batch(self, idx, rng: np.random.Generator, train: bool = True) -> torch.Tensor:
        x = images_to_tensor(self.records[idx])
        if train and self.standard_aug:
            x = flip_crop(x, rng)
        return x


class ClipSource:
    """Generated audio clips; each draw is a random 1 s view turned into a log-Mel image."""

    def __init__(self, clips: np.ndarray, sample_rate: int, spec_cfg: SpectrogramConfig | None = None):
        self.clips = clips
        self.sample_rate = sample_rate
        self.spec_cfg = spec_cfg or SpectrogramConfig(sample_rate=sample_rate)

    def __len__(self):
        return len(self.clips)

    def batch(self, idx, rng: np.random.Generator, train: bool = True) -> torch.Tensor:
        feats = []
        for i in idx:
            clip = self.clips[i]
            view = training_view(clip, rng, self.sample_rate) if train else training_view(
                clip, sample_rate=self.sample_rate, offset=0)
            feats.append(compute_logmel(view, self.spec_cfg))
        return torch.from_numpy(np.stack(feats)).unsqueeze(1)


class TensorSource:
    """Precomputed float inputs, used as-is."""

    def __init__(self, inputs):
        self.inputs = torch.as_tensor(inputs)

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx, rng, train: bool = True) -> torch.Tensor:
        return self.inputs[torch.as_tensor(idx)]


def as_source(data, standard_aug: bool = True):
    from onedatum.patchforge.pipeline import PatchDataset

    if hasattr(data, "batch") and hasattr(data, "__len__"):
        return data
    if isinstance(data, PatchDataset):
        return PatchSource(data.records, standard_aug)
    if isinstance(data, ClipDataset):
        return ClipSource(data.clips, data.sample_rate)
    if isinstance(data, np.ndarray) and data.dtype == np.uint8 and data.ndim == 4:
        return PatchSource(data, standard_aug)
    return TensorSource(data)


@dataclass
class LabeledSet:
    """Labeled evaluation data: uint8 ``N x H x W x C`` images or float model-ready inputs."""

    inputs: np.ndarray | torch.Tensor
    labels: np.ndarray
    num_classes: int
    name: str = "test"

    def __len__(self):
        return len(self.labels)

    def _batch(self, sl):
        x = self.inputs[sl]
        if isinstance(x, np.ndarray) and x.dtype == np.uint8:
            return images_to_tensor(x)
        return torch.as_tensor(x)

    @torch.no_grad()
    def predict(self, model, batch_size: int = 500) -> torch.Tensor:
        was_training = model.training
        model.eval()
        try:
            outs = [torch.softmax(model(self._batch(slice(i, i + batch_size))), dim=-1)
                    for i in range(0, len(self), batch_size)]
        finally:
            model.train(was_training)
        return torch.cat(outs)


@dataclass
class ClipLabeledSet:
    """Full-length labeled clips, scored by averaging over 1 s segments."""

    clips: list
    labels: np.ndarray
    num_classes: int
    spec_cfg: SpectrogramConfig = SpectrogramConfig()
    name: str = "test"

    def __len__(self):
        return len(self.labels)

    def predict(self, model, batch_size: int = 0) -> torch.Tensor:
        return torch.from_numpy(np.stack([evaluate_clip(model, c, self.spec_cfg) for c in self.clips]))


def evaluate(model, data, batch_size: int = 500) -> dict:
    """Top-1 accuracy and per-class accuracy on a labeled set."""
    probs = data.predict(model, batch_size)
    pred = probs.argmax(dim=-1).numpy()
    labels = np.asarray(data.labels)
    correct = pred == labels
    per_class = []
    for c in range(data.num_classes):
        mask = labels == c
        per_class.append(float(correct[mask].mean()) if mask.any() else None)
    return {"top1": float(correct.mean()), "per_class": per_class}
