"""On-disk layout for patch datasets: ``patches.sid`` + ``manifest.json`` (+ ``png/``)."""
from __future__ import annotations

import shutil
from pathlib import Path

from PIL import Image

from onedatum import packed

RECORDS_NAME = "patches.sid"
MANIFEST_NAME = "manifest.json"


def save_patch_dataset(ds, out, png: bool = False) -> Path:
    out = Path(out)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    try:
        packed.write_sid(out / RECORDS_NAME, ds.records)
        manifest = dict(ds.manifest, count=len(ds.records), records=RECORDS_NAME)
        packed.write_json(out / MANIFEST_NAME, manifest)
        if png:
            png_dir = out / "png"
            png_dir.mkdir(exist_ok=True)
            width = len(str(len(ds.records) - 1))
            for i, rec in enumerate(ds.records):
                Image.fromarray(rec).save(png_dir / f"{i:0{width}d}.png")
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for name in (RECORDS_NAME, MANIFEST_NAME):
                (out / name).unlink(missing_ok=True)
            shutil.rmtree(out / "png", ignore_errors=True)
        raise
    return out


def load_patch_dataset(path, mmap: bool = False):
    from onedatum.patchforge.pipeline import PatchDataset

    path = Path(path)
    if path.is_file():
        path = path.parent
    manifest = packed.read_json(path / MANIFEST_NAME)
    records = packed.read_sid(path / manifest.get("records", RECORDS_NAME), mmap=mmap)
    return PatchDataset(records, manifest)
