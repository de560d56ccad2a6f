"""Single-clip audio datasets."""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from onedatum import packed
from onedatum.audioforge import augment
from onedatum.audioforge.spectrogram import SpectrogramConfig, compute_logmel
from onedatum.errors import ConfigError, LoadError, PreconditionError

log = logging.getLogger(__name__)

TARGET_RATE = 16_000
SEGMENT_SECONDS = 2.0
FORMAT_VERSION = 1
RECORDS_NAME = "clips.sad"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SourceClip:
    samples: np.ndarray
    sample_rate: int = TARGET_RATE
    name: str = "clip"
    content_hash: str = field(default="", compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float32)
        if x.ndim != 1:
            raise PreconditionError("SourceClip samples must be mono")
        if self.sample_rate <= 0:
            raise PreconditionError("sample_rate must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        digest = hashlib.sha256(f"{self.sample_rate}:".encode() + x.tobytes()).hexdigest()
        object.__setattr__(self, "content_hash", digest)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def resample(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(x, dtype=np.float32)
    g = gcd(src_rate, dst_rate)
    return signal.resample_poly(x, dst_rate // g, src_rate // g).astype(np.float32)


def _to_float(data: np.ndarray) -> np.ndarray:
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    return data.astype(np.float32) / float(np.iinfo(data.dtype).max + 1)


def load_source_clip(path, rate: int = TARGET_RATE) -> SourceClip:
    """Read a WAV file, mix down to mono and resample to ``rate``."""
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read audio {path}: {exc}") from exc
    x = _to_float(np.asarray(data))
    if x.ndim == 2:
        warnings.warn(f"{path}: mixing {x.shape[1]} channels down to mono", stacklevel=2)
        x = x.mean(axis=1)
    return SourceClip(np.clip(resample(x, sr, rate), -1, 1), rate, name=path.stem)


def clip_rng(global_seed: int, index: int) -> np.random.Generator:
    # spawn_key offset keeps audio streams disjoint from patch streams
    return np.random.default_rng(np.random.SeedSequence(global_seed, spawn_key=(1, index)))


def generate_clip(src: SourceClip, index: int, global_seed: int = 0,
                  segment_seconds: float = SEGMENT_SECONDS,
                  ops: tuple[str, ...] = augment.OP_NAMES,
                  return_op: bool = False):
    """Random ``segment_seconds`` crop of ``src`` with one uniformly chosen augmentation."""
    seg = int(round(segment_seconds * src.sample_rate))
    if len(src.samples) < seg:
        raise PreconditionError(f"clip of {src.duration:.2f}s shorter than {segment_seconds}s segment")
    if index < 0:
        raise PreconditionError("index must be non-negative")
    rng = clip_rng(global_seed, index)
    start = int(rng.integers(0, len(src.samples) - seg + 1))
    op = ops[int(rng.integers(len(ops)))]
    y = augment.apply(op, src.samples[start:start + seg], src.sample_rate, rng)
    return (y, op) if return_op else y


@dataclass
class ClipDataset:
    clips: np.ndarray
    sample_rate: int
    manifest: dict

    def __len__(self):
        return len(self.clips)


def generate_clip_dataset(src: SourceClip, count: int, global_seed: int = 0, out=None,
                          segment_seconds: float = SEGMENT_SECONDS,
                          ops: tuple[str, ...] = augment.OP_NAMES) -> ClipDataset:
    if count <= 0:
        raise ConfigError("count must be positive")
    unknown = set(ops) - set(augment.OP_NAMES)
    if unknown:
        raise ConfigError(f"unknown augmentations {sorted(unknown)}")
    seg = int(round(segment_seconds * src.sample_rate))
    clips = np.empty((count, seg), dtype=np.float32)
    for i in range(count):
        clips[i] = generate_clip(src, i, global_seed, segment_seconds, ops)
    manifest = {
        "kind": "clips",
        "format_version": FORMAT_VERSION,
        "source_name": src.name,
        "source_hash": src.content_hash,
        "seed": global_seed,
        "count": count,
        "segment_seconds": segment_seconds,
        "sample_rate": src.sample_rate,
        "ops": list(ops),
        "records": RECORDS_NAME,
    }
    ds = ClipDataset(clips, src.sample_rate, manifest)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        try:
            packed.write_sad(out / RECORDS_NAME, clips, src.sample_rate)
            packed.write_json(out / MANIFEST_NAME, manifest)
        except BaseException:
            (out / RECORDS_NAME).unlink(missing_ok=True)
            raise
    return ds


def load_clip_dataset(path) -> ClipDataset:
    path = Path(path)
    manifest = packed.read_json(path / MANIFEST_NAME)
    clips, rate = packed.read_sad(path / manifest.get("records", RECORDS_NAME))
    return ClipDataset(clips, rate, manifest)


def training_view(clip: np.ndarray, rng: np.random.Generator | None = None,
                  sample_rate: int = TARGET_RATE, seconds: float = 1.0,
                  offset: int | None = None) -> np.ndarray:
    """Contiguous ``seconds``-long window at a uniform (or given) offset."""
    n = int(round(seconds * sample_rate))
    if len(clip) < n:
        raise PreconditionError(f"clip of {len(clip)} samples shorter than {n}")
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng()
        offset = int(rng.integers(0, len(clip) - n + 1))
    return clip[offset:offset + n]


def clip_segments(clip: np.ndarray, sample_rate: int = TARGET_RATE, seconds: float = 1.0) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    k = len(clip) // n
    if k == 0:
        raise PreconditionError(f"clip of {len(clip)} samples shorter than one {seconds}s segment")
    return np.asarray(clip[:k * n]).reshape(k, n)


def evaluate_clip(model, clip: np.ndarray, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Mean softmax over consecutive non-overlapping 1 s segments; a trailing partial segment is dropped."""
    import torch

    segs = clip_segments(clip, cfg.sample_rate)
    feats = np.stack([compute_logmel(s, cfg) for s in segs])[:, None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters(), None)
            dtype = param.dtype if param is not None else torch.float32
            probs = torch.softmax(model(torch.from_numpy(feats).to(dtype)), dim=-1)
    finally:
        model.train(was_training)
    return probs.mean(dim=0).numpy()
