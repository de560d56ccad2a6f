"""Single-image patch generation."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from onedatum.errors import ConfigError, LoadError, PreconditionError
from onedatum.patchforge import storage, transforms

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def pixel_hash(pixels: np.ndarray) -> str:
    """Digest of a decoded pixel buffer, independent of the file it came from."""
    arr = np.ascontiguousarray(pixels)
    h = hashlib.sha256()
    h.update(f"{arr.dtype.str}:{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class SourceImage:
    """The single image a patch dataset is generated from."""

    pixels: np.ndarray
    name: str = "source"
    content_hash: str = field(default="", compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise PreconditionError(f"expected HxWx3 uint8 pixels, got {px.shape} {px.dtype}")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "content_hash", pixel_hash(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 32
    count: int = 50_000
    global_seed: int = 0
    jitter_strengths: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    affine_degrees: float = 30.0
    affine_shear: float = 30.0
    rrc_scale: tuple[float, float] = (2e-3, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.5

    def __post_init__(self):
        if self.patch_size <= 0:
            raise ConfigError("patch_size must be positive")
        if self.count <= 0:
            raise ConfigError("count must be positive")
        lo, hi = self.rrc_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"rrc_scale must satisfy 0 < lo <= hi <= 1, got {self.rrc_scale}")
        if not 0 <= self.global_seed < 2**64:
            raise ConfigError("global_seed must be an unsigned 64-bit integer")

    @property
    def resize_side(self) -> int:
        return int(round(1.42 * self.patch_size))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchConfig":
        d = dict(d)
        for key in ("jitter_strengths", "rrc_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PatchDataset:
    records: np.ndarray
    manifest: dict

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def check_source(src: SourceImage, patch_size: int) -> None:
    if src.height < 2 * patch_size or src.width < 2 * patch_size:
        raise PreconditionError(
            f"source {src.width}x{src.height} too small for patch size {patch_size}; "
            f"need at least {2 * patch_size} pixels per side")


def load_source_image(path, *, strict: bool = False, patch_size: int | None = None,
                      name: str | None = None) -> SourceImage:
    """Decode an image file into a :class:`SourceImage`.

    Grayscale, palette and alpha images are converted to RGB with a warning,
    or rejected when ``strict`` is set.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode != "RGB":
                if strict:
                    raise LoadError(f"{path}: expected RGB image, got mode {mode}")
                warnings.warn(f"{path}: converting mode {mode} to RGB", stacklevel=2)
                im = im.convert("RGB")
            pixels = np.asarray(im, dtype=np.uint8)
    except LoadError:
        raise
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc
    src = SourceImage(pixels, name=name or path.stem)
    if patch_size is not None:
        check_source(src, patch_size)
    return src


def make_noise_image(height: int, width: int, seed: int = 0) -> SourceImage:
    """I.i.d. uniform 8-bit noise image."""
    if height <= 0 or width <= 0:
        raise PreconditionError("height and width must be positive")
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return SourceImage(pixels, name=f"noise-{seed}")


_STOCK = {
    # stand-ins for the photographs used in the single-image literature
    "city": ("sklearn", "china.jpg"),
    "flower": ("sklearn", "flower.jpg"),
    "universe": ("skimage", "hubble_deep_field"),
    "animals": ("skimage", "chelsea"),
    "bridge": ("skimage", "rocket"),
}


def stock_image_names() -> list[str]:
    return sorted(_STOCK) + ["noise"]


def stock_image(name: str) -> SourceImage:
    """Load a bundled source image by name (``noise`` is 2560x1920 uniform noise)."""
    if name == "noise":
        return make_noise_image(1920, 2560, seed=0)
    try:
        lib, key = _STOCK[name]
    except KeyError:
        raise ConfigError(f"unknown stock image {name!r}; choose from {stock_image_names()}")
    if lib == "sklearn":
        from sklearn.datasets import load_sample_image
        pixels = load_sample_image(key)
    else:
        import skimage.data
        pixels = getattr(skimage.data, key)()
    return SourceImage(np.asarray(pixels, dtype=np.uint8)[..., :3], name=name)


def resolve_source(spec: str) -> SourceImage:
    """``stock:<name>`` or a file path."""
    if spec.startswith("stock:"):
        return stock_image(spec.split(":", 1)[1])
    return load_source_image(spec)


def patch_rng(global_seed: int, index: int) -> np.random.Generator:
    """Counter-based per-index stream; independent of generation order."""
    return np.random.default_rng(np.random.SeedSequence(global_seed, spawn_key=(index,)))


def generate_patch(src: SourceImage, index: int, cfg: PatchConfig) -> np.ndarray:
    """Produce patch ``index`` of the dataset described by ``cfg``."""
    if not 0 <= index < cfg.count:
        raise PreconditionError(f"index {index} outside [0, {cfg.count})")
    check_source(src, cfg.patch_size)
    rng = patch_rng(cfg.global_seed, index)
    p = cfg.patch_size

    img = transforms.random_crop(src.pixels, int(0.5 * min(src.height, src.width)), rng)
    img = transforms.random_resized_crop(img, cfg.resize_side, cfg.rrc_scale, rng)
    img = transforms.random_affine(img, cfg.affine_degrees, cfg.affine_shear, rng)
    if rng.random() < cfg.flip_prob:
        img = img[::-1]
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    img = transforms.center_crop(img, p) / 255.0
    if rng.random() < cfg.jitter_prob:
        img = transforms.color_jitter(img.astype(np.float32), cfg.jitter_strengths, rng)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _generate_range(src: SourceImage, cfg: PatchConfig, start: int, stop: int) -> np.ndarray:
    out = np.empty((stop - start, cfg.patch_size, cfg.patch_size, 3), dtype=np.uint8)
    for i in range(start, stop):
        out[i - start] = generate_patch(src, i, cfg)
    return out


def generate_records(src: SourceImage, cfg: PatchConfig, workers: int = 1,
                     chunk: int = 2048) -> np.ndarray:
    """All ``cfg.count`` patches in index order, optionally across processes."""
    check_source(src, cfg.patch_size)
    bounds = [(s, min(s + chunk, cfg.count)) for s in range(0, cfg.count, chunk)]
    if workers <= 1 or len(bounds) == 1:
        parts = [_generate_range(src, cfg, a, b) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_generate_range, src, cfg, a, b) for a, b in bounds]
            parts = [f.result() for f in futures]
    return np.concatenate(parts, axis=0)


def dataset_manifest(src: SourceImage, cfg: PatchConfig) -> dict:
    return {
        "kind": "patches",
        "format_version": FORMAT_VERSION,
        "source_name": src.name,
        "source_hash": src.content_hash,
        "source_shape": list(src.pixels.shape),
        "seed": cfg.global_seed,
        "config": cfg.to_dict(),
    }


def generate_dataset(src: SourceImage, cfg: PatchConfig, out=None, *, workers: int = 1,
                     png: bool = False) -> PatchDataset:
    """Generate the full dataset and, if ``out`` is given, persist it there.

    ``out`` is a directory; it receives ``patches.sid`` and ``manifest.json``
    (plus ``png/`` when requested). Nothing is left behind on failure.
    """
    records = generate_records(src, cfg, workers=workers)
    manifest = dataset_manifest(src, cfg)
    ds = PatchDataset(records, manifest)
    if out is not None:
        storage.save_patch_dataset(ds, out, png=png)
        log.info("wrote %d patches to %s", len(records), os.fspath(out))
    return ds
