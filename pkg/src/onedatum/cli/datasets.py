"""Labeled target datasets: CIFAR-10/100, SpeechCommands and plain ``.npz`` files."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

from onedatum.distillery.data import ClipLabeledSet, LabeledSet
from onedatum.errors import ChecksumError, ConfigError, MissingPrerequisiteError

DATA_ENV = "ONEDATUM_DATA"

CIFAR_ARCHIVES = {
    "cifar10": ("cifar-10-python.tar.gz", "c58f30108f718f92721af3b95e74349a", 10),
    "cifar100": ("cifar-100-python.tar.gz", "eb9058c3a382ffc7106e4002c42a8d85", 100),
}
SPEECH_COMMANDS_DIR = "speech_commands_v0.02"


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "onedatum"))


def md5sum(path, chunk: int = 1 << 20) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        while block := f.read(chunk):
            h.update(block)
    return h.hexdigest()


def num_classes(name: str) -> int:
    if name in CIFAR_ARCHIVES:
        return CIFAR_ARCHIVES[name][2]
    if name == "speechcommands":
        return 35
    raise ConfigError(f"unknown dataset {name!r}")


def load_cifar(name: str = "cifar10", split: str = "test", root=None, download: bool = True):
    """``(images uint8 N x 32 x 32 x 3, labels int64)``; verifies the archive checksum."""
    from torchvision import datasets

    if name not in CIFAR_ARCHIVES:
        raise ConfigError(f"unknown CIFAR variant {name!r}")
    root = Path(root) if root is not None else data_root()
    archive, md5, _ = CIFAR_ARCHIVES[name]
    if (root / archive).exists() and md5sum(root / archive) != md5:
        raise ChecksumError(f"{root / archive} failed its md5 check; delete it and retry")
    cls = datasets.CIFAR10 if name == "cifar10" else datasets.CIFAR100
    try:
        ds = cls(str(root), train=(split == "train"), download=download)
    except Exception as exc:  # torchvision raises bare RuntimeError / URLError
        raise MissingPrerequisiteError(
            f"{name} is not available under {root} and could not be downloaded ({exc}); "
            f"place {archive} there or set {DATA_ENV}") from exc
    return np.asarray(ds.data, dtype=np.uint8), np.asarray(ds.targets, dtype=np.int64)


def load_speech_commands(split: str = "test", root=None, rate: int = 16_000):
    """Clips and labels of an extracted SpeechCommands v0.02 tree (35 words)."""
    from onedatum.audioforge.clips import load_source_clip

    base = (Path(root) if root is not None else data_root()) / SPEECH_COMMANDS_DIR
    if not base.is_dir():
        raise MissingPrerequisiteError(f"extract SpeechCommands v0.02 to {base}")
    words = sorted(p.name for p in base.iterdir() if p.is_dir() and not p.name.startswith("_"))
    lists = {}
    for key, fname in (("validation", "validation_list.txt"), ("test", "testing_list.txt")):
        f = base / fname
        lists[key] = set(f.read_text().split()) if f.exists() else set()
    clips, labels = [], []
    for label, word in enumerate(words):
        for wav in sorted((base / word).glob("*.wav")):
            rel = f"{word}/{wav.name}"
            in_split = (rel in lists.get(split, set())) if split != "train" else (
                rel not in lists["validation"] and rel not in lists["test"])
            if in_split:
                x = load_source_clip(wav, rate).samples
                clips.append(np.pad(x, (0, max(0, rate - len(x)))))
                labels.append(label)
    return clips, np.asarray(labels, dtype=np.int64)


def load_npz(path):
    """``images``/``inputs`` and ``labels`` arrays from an ``.npz`` file."""
    with np.load(path) as z:
        key = "images" if "images" in z else "inputs"
        return z[key], z["labels"].astype(np.int64)


def labeled_set(name: str, split: str = "test", limit: int | None = None):
    """Evaluation set by name: ``cifar10``, ``cifar100``, ``speechcommands`` or ``npz:<path>``."""
    if name.startswith("npz:"):
        x, y = load_npz(name[4:])
        n_cls = int(y.max()) + 1
    elif name == "speechcommands":
        clips, y = load_speech_commands(split)
        if limit:
            clips, y = clips[:limit], y[:limit]
        return ClipLabeledSet(clips, y, 35, name=f"{name}-{split}")
    else:
        x, y = load_cifar(name, split)
        n_cls = num_classes(name)
    if limit:
        x, y = x[:limit], y[:limit]
    return LabeledSet(x, y, n_cls, name=f"{name}-{split}")
