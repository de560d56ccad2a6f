"""Ablation grids: each cell is an independent ``distill`` child run with shared seeds."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from onedatum.cli.config import DISTILL_EPOCHS, RunDir, RunManifest, jsonable
from onedatum.cli.runs import run_distill
from onedatum.errors import ConfigError, MissingPrerequisiteError
from onedatum.patchforge.storage import RECORDS_NAME

log = logging.getLogger(__name__)

SOURCE_IMAGES = ("noise", "universe", "bridge", "city", "animals")
DATASET_SIZES = (1_000, 10_000, 100_000)
REFERENCE_SIZE = 50_000
AUGMENTATIONS = {
    "none": {"standard_aug": False, "mix": "none"},
    "flip-crop": {"standard_aug": True, "mix": "none"},
    "mixup": {"standard_aug": True, "mix": "mixup"},
    "cutmix": {"standard_aug": True, "mix": "cutmix"},
}
SIGNALS = ("full", "top5", "hard")
LOSSES = ("kl", "l1", "l2")
GRIDS = ("source-image", "dataset-size", "augmentation", "signal", "loss")


def _patches_hint(image: str, out, count: int, seed: int) -> str:
    return f"onedatum gen-patches --image stock:{image} --size 32 --count {count} --seed {seed} --out {out}"


def grid_cells(name: str, opts: dict) -> dict[str, dict]:
    """Child-run options per cell name (before output paths are assigned)."""
    base = {k: v for k, v in opts.items() if k not in ("grid", "cells", "parallel", "patches_root", "out")}
    if name == "source-image":
        root = opts.get("patches_root")
        if not root:
            raise ConfigError("the source-image grid needs --patches-root holding one directory per image")
        return {img: {**base, "data": str(Path(root) / img)} for img in SOURCE_IMAGES}
    if name == "dataset-size":
        # equal optimizer steps at every size, so only data diversity varies
        epochs = opts.get("epochs") or DISTILL_EPOCHS[opts.get("budget") or "pilot"]
        return {f"n{n}": {**base, "data_limit": n, "epochs": max(1, math.ceil(epochs * REFERENCE_SIZE / n))}
                for n in DATASET_SIZES}
    if name == "augmentation":
        return {k: {**base, **v} for k, v in AUGMENTATIONS.items()}
    if name == "signal":
        return {s: {**base, "signal": s} for s in SIGNALS}
    if name == "loss":
        return {s: {**base, "loss": s} for s in LOSSES}
    raise ConfigError(f"unknown grid {name!r}; choose from {GRIDS}")


def check_prerequisites(name: str, cells: dict[str, dict]) -> None:
    missing = []
    seed = next(iter(cells.values())).get("seed") or 0
    for cell, o in cells.items():
        teacher = o.get("teacher")
        if not teacher or not Path(teacher).exists():
            missing.append(f"onedatum train-teacher --dataset cifar10 --arch resnet20 --out RUN "
                           f"(then pass --teacher RUN/checkpoints/teacher.pt; missing: {teacher})")
        data = o.get("data")
        need = o.get("data_limit") or 1
        if not data or not (Path(data) / RECORDS_NAME).exists():
            image = cell if name == "source-image" else "city"
            count = max(REFERENCE_SIZE, need if name != "dataset-size" else max(DATASET_SIZES))
            missing.append(_patches_hint(image, data or "DIR", count, seed))
        elif need > 1:
            from onedatum.packed import read_sid
            have = len(read_sid(Path(data) / RECORDS_NAME, mmap=True))
            if have < need:
                missing.append(_patches_hint("city", data, max(DATASET_SIZES), seed)
                               + f"  (have {have} records, need {need})")
    if missing:
        lines = "\n  ".join(dict.fromkeys(missing))
        raise MissingPrerequisiteError(f"grid {name!r} is missing prerequisites; run first:\n  {lines}")


def _child(opts: dict) -> dict:
    threads = opts.pop("_threads", None)
    if threads:
        import torch
        torch.set_num_threads(threads)
    return run_distill(opts)


def run_ablation(name: str, opts: dict, parallel: int = 1, cells: list[str] | None = None) -> dict:
    """Run (or resume) every cell of grid ``name`` under ``opts["out"]/<cell>``."""
    if parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    out = Path(opts.get("out") or "")
    if not opts.get("out"):
        raise ConfigError("grid needs --out")
    all_cells = grid_cells(name, opts)
    if cells:
        unknown = set(cells) - set(all_cells)
        if unknown:
            raise ConfigError(f"grid {name!r} has no cells {sorted(unknown)}; choose from {sorted(all_cells)}")
        all_cells = {k: v for k, v in all_cells.items() if k in cells}
    for cell, o in all_cells.items():
        o["out"] = str(out / cell)
    check_prerequisites(name, all_cells)

    run = RunDir(out)
    manifest = run.begin(RunManifest("grid", jsonable({"grid": name, "cells": sorted(all_cells),
                                                       "options": {k: v for k, v in opts.items() if k != "out"}}),
                                     {"seed": opts.get("seed") or 0}))
    todo = [c for c in all_cells if not RunDir(all_cells[c]["out"]).is_complete()]
    results: dict[str, dict] = {}
    if parallel == 1:
        for cell in todo:
            log.info("grid %s: cell %s", name, cell)
            results[cell] = run_distill(dict(all_cells[cell]))
    else:
        threads = max(1, (os.cpu_count() or 1) // parallel)
        with ProcessPoolExecutor(parallel) as pool:
            futures = {c: pool.submit(_child, {**all_cells[c], "_threads": threads}) for c in todo}
            results = {c: f.result() for c, f in futures.items()}
    summary = {}
    for cell, o in all_cells.items():
        m = RunDir(o["out"]).read_manifest()
        summary[cell] = m.metrics if m is not None else results.get(cell)
    run.finish(manifest, {"cells": summary})
    return summary
