"""Confidence histograms, 2-D embeddings and per-class diagnostics, plus report writers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from onedatum.distillery.data import as_source, images_to_tensor
from onedatum.distillery.losses import soften
from onedatum.errors import MissingPrerequisiteError, PreconditionError

TSNE_PERPLEXITY = 30.0


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist()}


def _as_inputs(inputs) -> torch.Tensor:
    if isinstance(inputs, np.ndarray) and inputs.dtype == np.uint8 and inputs.ndim == 4:
        return images_to_tensor(inputs)
    return torch.as_tensor(inputs)


@torch.no_grad()
def predict_logits(model, inputs, batch_size: int = 500) -> torch.Tensor:
    x = _as_inputs(inputs)
    was = model.training
    model.eval()
    try:
        return torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    finally:
        model.train(was)


def confidence_scores(logits, tau: float) -> np.ndarray:
    return soften(logits, tau).max(dim=-1).values.double().numpy()


def confidence_histogram(model, inputs, tau: float = 8.0, bins: int = 20) -> Histogram:
    """Histogram over [0, 1] of the temperature-softened top-class probability."""
    if bins < 1:
        raise PreconditionError("bins must be >= 1")
    scores = confidence_scores(predict_logits(model, inputs), tau)
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return Histogram(counts, edges)


@torch.no_grad()
def penultimate_features(model, inputs, batch_size: int = 500) -> np.ndarray:
    """Inputs to the last linear layer, ``n x d``."""
    head = [m for m in model.modules() if isinstance(m, torch.nn.Linear)][-1]
    store = []
    handle = head.register_forward_pre_hook(lambda _m, args: store.append(args[0].detach().double().numpy()))
    try:
        predict_logits(model, inputs, batch_size)
    finally:
        handle.remove()
    return np.concatenate(store)


def embed_2d(features, seed: int = 0, perplexity: float = TSNE_PERPLEXITY) -> np.ndarray:
    """t-SNE coordinates, ``n x 2``. Perplexity is capped at ``n - 1`` for tiny inputs."""
    from sklearn.manifold import TSNE

    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 5:
        raise PreconditionError("embed_2d needs an n x d matrix with n >= 5")
    tsne = TSNE(n_components=2, perplexity=min(perplexity, x.shape[0] - 1), init="pca",
                random_state=seed)
    return tsne.fit_transform(x)


def write_embedding(path, coords: np.ndarray, labels=None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label"])
        for i, (a, b) in enumerate(coords):
            w.writerow([f"{a:.6f}", f"{b:.6f}", "" if labels is None else labels[i]])
    return path


@torch.no_grad()
def teacher_top1_frequency(teacher, data, num_classes: int, batch_size: int = 500) -> np.ndarray:
    """How often each class is the teacher's argmax over one pass of (unaugmented) training data."""
    source = as_source(data, standard_aug=False)
    counts = np.zeros(num_classes, dtype=np.int64)
    was = teacher.training
    teacher.eval()
    try:
        for i in range(0, len(source), batch_size):
            idx = np.arange(i, min(i + batch_size, len(source)))
            pred = teacher(source.batch(idx, None, train=False)).argmax(dim=-1).numpy()
            counts += np.bincount(pred, minlength=num_classes)
    finally:
        teacher.train(was)
    return counts


def per_class_report(metrics, teacher, dataset, num_classes: int | None = None) -> dict:
    """Per-class accuracy curves from the metrics log, joined with teacher top-1 frequencies."""
    records = [r for r in metrics if "epoch" in r and "event" not in r]
    if not records or any("per_class_top1" not in r for r in records):
        raise MissingPrerequisiteError(
            "metrics log has no per-class accuracy; re-run distill with --log-per-class")
    curves = np.array([[np.nan if v is None else v for v in r["per_class_top1"]] for r in records]).T
    num_classes = num_classes or curves.shape[0]
    freq = teacher_top1_frequency(teacher, dataset, num_classes)
    final = curves[:, -1]
    return {
        "epochs": [r["epoch"] for r in records],
        "curves": curves.tolist(),
        "frequency": freq.tolist(),
        "scatter": [{"class": c, "frequency": int(freq[c]), "final_top1": float(final[c])}
                    for c in range(num_classes)],
    }


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_histograms(path, hists: dict[str, Histogram], xlabel: str) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, h in hists.items():
        ax.stairs(h.counts / max(h.counts.sum(), 1), h.edges, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_heatmap(path, matrix: np.ndarray, rows: list[str], cols: list[str]) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="magma", origin="lower")
    ax.set_xlabel("model B layer")
    ax.set_ylabel("model A layer")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_scatter(path, coords: np.ndarray, labels=None, xlabel="", ylabel="") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    if labels is None:
        ax.scatter(coords[:, 0], coords[:, 1], s=3)
    else:
        ax.scatter(coords[:, 0], coords[:, 1], s=3, c=labels, cmap="tab10")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
