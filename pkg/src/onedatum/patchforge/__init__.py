"""Generate augmented patch datasets from a single source image."""
from onedatum.patchforge.pipeline import (
    PatchConfig,
    PatchDataset,
    SourceImage,
    check_source,
    generate_dataset,
    generate_patch,
    generate_records,
    load_source_image,
    make_noise_image,
    pixel_hash,
    resolve_source,
    stock_image,
    stock_image_names,
)
from onedatum.patchforge.storage import load_patch_dataset, save_patch_dataset

__all__ = [
    "PatchConfig", "PatchDataset", "SourceImage", "check_source", "generate_dataset",
    "generate_patch", "generate_records", "load_patch_dataset", "load_source_image",
    "make_noise_image", "pixel_hash", "resolve_source", "save_patch_dataset",
    "stock_image", "stock_image_names",
]
