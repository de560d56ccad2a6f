"""Command implementations shared by the argument parser and the grid runner.

Each ``run_*`` takes a flat options mapping (flags already merged over
config-file values) and returns the final metrics dict.
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from onedatum.audioforge.clips import (MANIFEST_NAME as CLIP_MANIFEST, RECORDS_NAME as CLIP_RECORDS,
                                       ClipDataset, generate_clip_dataset, load_clip_dataset,
                                       load_source_clip)
from onedatum.audioforge.spectrogram import compute_logmel
from onedatum.cli import datasets
from onedatum.cli.config import BUDGETS, DISTILL_EPOCHS, RunDir, RunManifest, file_sha256, jsonable
from onedatum.cli.teacher import (SupervisedClips, SupervisedImages, TeacherConfig, preset_for_family,
                                  teacher_preset, train_supervised)
from onedatum.compress import CompressionPlan, compress_with_self_distillation, prunable
from onedatum.distillery.data import ClipLabeledSet, as_source, evaluate
from onedatum.distillery.train import DistillConfig, distill, preset, read_metrics
from onedatum.errors import ConfigError, MissingPrerequisiteError
from onedatum.lens import cka as lens_cka
from onedatum.lens import gist as lens_gist
from onedatum.lens import reports
from onedatum.modelzoo import (build_model, load_checkpoint, read_checkpoint, save_checkpoint,
                               spec_from_name, state_digest)
from onedatum.packed import read_json
from onedatum.patchforge import PatchConfig, generate_dataset, load_patch_dataset, resolve_source
from onedatum.patchforge.pipeline import PatchDataset
from onedatum.patchforge.storage import MANIFEST_NAME as PATCH_MANIFEST, RECORDS_NAME as PATCH_RECORDS

log = logging.getLogger(__name__)

DISTILL_FIELDS = {f for f in DistillConfig.__dataclass_fields__}
TEACHER_FIELDS = {f for f in TeacherConfig.__dataclass_fields__}


# -- data helpers -------------------------------------------------------------

def load_training_data(path, limit: int | None = None):
    """Generated patches or clips from a ``gen-patches`` / ``gen-audio`` directory."""
    path = Path(path)
    if (path / PATCH_RECORDS).exists():
        ds = load_patch_dataset(path, mmap=True)
        if limit is not None:
            if limit > len(ds):
                raise MissingPrerequisiteError(
                    f"{path} holds {len(ds)} patches but {limit} are needed; regenerate with "
                    f"onedatum gen-patches --count {limit}")
            ds = PatchDataset(ds.records[:limit], dict(ds.manifest))
        return ds
    if (path / CLIP_RECORDS).exists():
        ds = load_clip_dataset(path)
        if limit is not None:
            ds = ClipDataset(ds.clips[:limit], ds.sample_rate, ds.manifest)
        return ds
    raise MissingPrerequisiteError(
        f"no generated dataset at {path}; create one with onedatum gen-patches or onedatum gen-audio")


def dataset_fingerprint(path) -> dict:
    path = Path(path)
    for records, manifest in ((PATCH_RECORDS, PATCH_MANIFEST), (CLIP_RECORDS, CLIP_MANIFEST)):
        if (path / records).exists():
            info = read_json(path / manifest) if (path / manifest).exists() else {}
            return {"path": str(path.resolve()), "records_sha256": file_sha256(path / records),
                    "source_hash": info.get("source_hash"), "seed": info.get("config", {}).get("seed",
                                                                                               info.get("seed"))}
    raise MissingPrerequisiteError(f"no generated dataset at {path}")


def eval_set_for(name, limit=None):
    if name in (None, "", "none"):
        return None
    return datasets.labeled_set(name, "test", limit)


def _require(path, hint: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} does not exist; run first:\n  {hint}")
    return path


# -- gen-patches / gen-audio ----------------------------------------------------

def run_gen_patches(opts: dict) -> dict:
    src = resolve_source(opts["image"])
    cfg = PatchConfig(patch_size=opts.get("size", 32), count=opts.get("count", 50_000),
                      global_seed=opts.get("seed", 0))
    out = Path(opts["out"])
    generate_dataset(src, cfg, out, workers=opts.get("workers", 1), png=opts.get("png", False))
    return {"count": cfg.count, "source_hash": src.content_hash, "out": str(out)}


def run_gen_audio(opts: dict) -> dict:
    src = load_source_clip(opts["clip"])
    out = Path(opts["out"])
    generate_clip_dataset(src, opts.get("count", 50_000), opts.get("seed", 0), out,
                          segment_seconds=opts.get("segment_seconds", 2.0))
    return {"count": opts.get("count", 50_000), "source_hash": src.content_hash, "out": str(out)}


# -- train-teacher --------------------------------------------------------------

def _supervised_data(name: str, cfg: TeacherConfig):
    if name.startswith("npz:"):
        x, y = datasets.load_npz(name[4:])
        train = x
    elif name == "speechcommands":
        clips, y = datasets.load_speech_commands("train")
        return SupervisedClips(clips, y), 35
    else:
        train, y = datasets.load_cifar(name, "train")
    if train.dtype != np.uint8:
        raise ConfigError("supervised image data must be uint8 N x H x W x C")
    n_cls = datasets.num_classes(name) if not name.startswith("npz:") else int(y.max()) + 1
    return SupervisedImages(train, y, cfg), n_cls


def resolve_teacher(opts: dict) -> tuple[dict, TeacherConfig]:
    arch = opts.get("arch") or "resnet20"
    family = spec_from_name(arch).family
    budget = opts.get("budget") or "pilot"
    if budget not in BUDGETS:
        raise ConfigError(f"budget must be one of {BUDGETS}")
    name = opts.get("preset") or "auto"
    name = preset_for_family(family) if name == "auto" else name
    overrides = {k: v for k, v in opts.items() if k in TEACHER_FIELDS and v is not None}
    if "epochs" in opts and opts["epochs"] is not None:
        base = teacher_preset(name, budget)
        overrides.setdefault("total_steps", int(opts["epochs"]) * base.steps_per_epoch)
    cfg = teacher_preset(name, budget, **overrides)
    resolved = {"arch": arch, "dataset": opts.get("dataset") or "cifar10", "preset": name,
                "budget": budget, "out": str(opts["out"]), **cfg.to_dict()}
    return jsonable(resolved), cfg


def run_train_teacher(opts: dict) -> dict:
    resolved, cfg = resolve_teacher(opts)
    data, n_cls = _supervised_data(resolved["dataset"], cfg)
    eval_set = eval_set_for(resolved["dataset"], opts.get("eval_limit"))
    run = RunDir(resolved["out"])
    manifest = run.begin(RunManifest("train-teacher", resolved, {"seed": cfg.seed},
                                     {"train": resolved["dataset"]}))
    spec = spec_from_name(resolved["arch"], n_cls)
    model = build_model(spec, cfg.seed)
    history = train_supervised(model, data, cfg, sink=run.path, eval_set=eval_set)
    payload = read_checkpoint(run.checkpoints / "teacher.pt")
    save_checkpoint(run.checkpoints / "teacher.pt", model,
                    {**payload["metadata"], "dataset": resolved["dataset"]})
    metrics = {"steps": cfg.total_steps, "val_top1": history[-1]["val_top1"] if history else (
        evaluate(model, eval_set)["top1"] if eval_set is not None else None),
        "state_digest": state_digest(model)}
    run.finish(manifest, metrics)
    return metrics


# -- distill ----------------------------------------------------------------------

def resolve_distill(opts: dict) -> tuple[dict, DistillConfig]:
    """Preset, then budget epochs, then explicit options; returns (manifest config, DistillConfig)."""
    for key in ("teacher", "data", "out"):
        if not opts.get(key):
            raise ConfigError(f"distill needs --{key}")
    budget = opts.get("budget") or "pilot"
    if budget not in BUDGETS:
        raise ConfigError(f"budget must be one of {BUDGETS}")
    base = preset(opts.get("preset") or "small-scale", epochs=DISTILL_EPOCHS[budget])
    fields = {k: v for k, v in opts.items() if k in DISTILL_FIELDS and v is not None}
    if "signal" in opts and opts["signal"] is not None:
        fields["signal_mode"] = opts["signal"]
    if "loss" in opts and opts["loss"] is not None:
        fields["loss_kind"] = opts["loss"]
    cfg = base.replace(**{k: tuple(v) if isinstance(v, list) else v for k, v in fields.items()})
    resolved = {
        "teacher": str(opts["teacher"]), "data": str(opts["data"]), "out": str(opts["out"]),
        "arch": opts.get("arch"), "dataset": opts.get("dataset"), "eval_limit": opts.get("eval_limit"),
        "data_limit": opts.get("data_limit"), "preset": opts.get("preset") or "small-scale",
        "budget": budget, **cfg.to_dict(),
    }
    return jsonable(resolved), cfg


def run_distill(opts: dict) -> dict:
    resolved, cfg = resolve_distill(opts)
    teacher_path = _require(resolved["teacher"], "onedatum train-teacher --dataset cifar10 --arch resnet20 --out RUN")
    _require(resolved["data"], "onedatum gen-patches --image stock:city --size 32 --count 50000 --out DIR")
    teacher, payload = load_checkpoint(teacher_path)
    if resolved["dataset"] is None:
        resolved["dataset"] = payload["metadata"].get("dataset")
    arch = resolved["arch"] or teacher.spec.name
    resolved["arch"] = arch
    data = load_training_data(resolved["data"], resolved["data_limit"])
    eval_set = eval_set_for(resolved["dataset"], resolved["eval_limit"])
    run = RunDir(resolved["out"])
    seeds = {"student_init": cfg.seed, "training": cfg.seed, "data": dataset_fingerprint(resolved["data"])["seed"]}
    manifest = run.begin(RunManifest("distill", resolved, seeds, {
        "train": dataset_fingerprint(resolved["data"]), "eval": resolved["dataset"],
        "teacher_digest": state_digest(teacher)}))
    spec = spec_from_name(arch, teacher.spec.num_classes, teacher.spec.input_shape)
    student = build_model(spec, cfg.seed)
    before = state_digest(teacher)
    result = distill(teacher, student, data, cfg, sink=run.path, eval_set=eval_set)
    metrics = {
        "val_top1": result.history[-1]["val_top1"] if result.history else (
            evaluate(student, eval_set)["top1"] if eval_set is not None else None),
        "steps": result.steps, "teacher_digest_before": before, "teacher_digest_after": state_digest(teacher),
    }
    run.finish(manifest, metrics)
    return metrics


# -- compress ---------------------------------------------------------------------

def run_compress(opts: dict) -> dict:
    for key in ("model", "out"):
        if not opts.get(key):
            raise ConfigError(f"compress needs --{key}")
    budget = opts.get("budget") or "pilot"
    epochs = opts.get("epochs")
    finetune = preset(opts.get("preset") or "small-scale",
                      epochs=DISTILL_EPOCHS[budget] if epochs is None else epochs)
    fields = {k: v for k, v in opts.items() if k in DISTILL_FIELDS and v is not None and k != "epochs"}
    finetune = finetune.replace(**fields)
    plan = CompressionPlan(opts.get("method") or "prune",
                           0.0 if opts.get("method") == "quantize" else float(opts.get("sparsity", 0.5)),
                           finetune=finetune)
    resolved = jsonable({"model": str(opts["model"]), "data": opts.get("data"), "out": str(opts["out"]),
                         "dataset": opts.get("dataset"), "eval_limit": opts.get("eval_limit"),
                         "budget": budget, **plan.to_dict()})
    model, payload = load_checkpoint(_require(resolved["model"], "onedatum train-teacher ... --out RUN"))
    if resolved["dataset"] is None:
        resolved["dataset"] = payload["metadata"].get("dataset")
    data = load_training_data(resolved["data"]) if resolved["data"] else None
    if data is None and finetune.epochs > 0:
        raise ConfigError("fine-tuning needs --data (or --epochs 0)")
    eval_set = eval_set_for(resolved["dataset"], resolved["eval_limit"])
    run = RunDir(resolved["out"])
    manifest = run.begin(RunManifest("compress", resolved, {"training": finetune.seed},
                                     {"train": dataset_fingerprint(resolved["data"]) if data is not None else None,
                                      "eval": resolved["dataset"]}))
    student, info = compress_with_self_distillation(model, plan, data, sink=run.path, eval_set=eval_set)
    save_checkpoint(run.checkpoints / "compressed.pt", student, {"plan": resolved,
                                                                 "scales": info.get("scales")})
    sparsity = {}
    for name, m in prunable(student):
        w = m.weight.detach()
        sparsity[name] = float((w == 0).sum()) / w.numel()
    metrics = {"sparsity": sparsity,
               "val_top1": evaluate(student, eval_set)["top1"] if eval_set is not None else None,
               "original_top1": evaluate(model, eval_set)["top1"] if eval_set is not None else None}
    run.finish(manifest, metrics)
    return metrics


# -- analyze ----------------------------------------------------------------------

def _model_inputs(data, count: int) -> torch.Tensor:
    source = as_source(data, standard_aug=False)
    count = min(count, len(source))
    return source.batch(np.arange(count), None, train=False)


def _eval_inputs(eval_set, count: int):
    if eval_set is None:
        return None, None
    count = min(count, len(eval_set))
    if isinstance(eval_set, ClipLabeledSet):
        cfg = eval_set.spec_cfg
        x = np.stack([compute_logmel(c[:cfg.sample_rate], cfg) for c in eval_set.clips[:count]])
        return torch.from_numpy(x).unsqueeze(1), eval_set.labels[:count]
    return eval_set._batch(slice(0, count)), eval_set.labels[:count]


def _analysis_context(opts: dict):
    run = RunDir(_require(opts["run"], "onedatum distill ... --out RUN"))
    manifest = run.read_manifest()
    cfg = manifest.config if manifest is not None else {}
    model_path = opts.get("model")
    if model_path is None:
        for name in ("student.pt", "compressed.pt", "teacher.pt"):
            if (run.checkpoints / name).exists():
                model_path = run.checkpoints / name
                break
    model = load_checkpoint(model_path)[0] if model_path else None
    teacher_path = opts.get("teacher") or cfg.get("teacher") or cfg.get("model")
    teacher = load_checkpoint(teacher_path)[0] if teacher_path else None
    data_path = opts.get("data") or cfg.get("data")
    dataset = opts.get("dataset") or cfg.get("dataset")
    run.reports.mkdir(parents=True, exist_ok=True)
    return run, model, teacher, data_path, dataset


def analyze_confidence(opts: dict) -> dict:
    run, student, teacher, data_path, dataset = _analysis_context(opts)
    count, tau, bins = opts.get("count") or 5000, opts.get("tau") or 8.0, opts.get("bins") or 20
    if student is None:
        raise MissingPrerequisiteError(f"{run.path} has no model checkpoint")
    inputs = {}
    if data_path:
        inputs["patches"] = _model_inputs(load_training_data(data_path), count)
    test_x, _ = _eval_inputs(eval_set_for(dataset, count), count)
    if test_x is not None:
        inputs["test"] = test_x
    if not inputs:
        raise ConfigError("confidence analysis needs --data or --dataset")
    hists = {}
    for split, x in inputs.items():
        for role, model in (("student", student), ("teacher", teacher)):
            if model is not None:
                hists[f"{role}/{split}"] = reports.confidence_histogram(model, x, tau, bins)
    out = {k: h.to_dict() for k, h in hists.items()}
    reports.write_json(run.reports / "confidence.json", {"tau": tau, "histograms": out})
    reports.plot_histograms(run.reports / "confidence.png", hists, "softened top-1 probability")
    return {"histograms": sorted(out)}


def analyze_cka(opts: dict) -> dict:
    run, student, teacher, data_path, dataset = _analysis_context(opts)
    reference = load_checkpoint(opts["reference"])[0] if opts.get("reference") else teacher
    if student is None or reference is None:
        raise MissingPrerequisiteError("cka needs the run's model and a --reference (or the run's teacher)")
    count = opts.get("count") or 1000
    x, _ = _eval_inputs(eval_set_for(dataset, count), count)
    if x is None:
        if not data_path:
            raise ConfigError("cka needs probe inputs: --dataset or --data")
        x = _model_inputs(load_training_data(data_path), count)
    mat, taps_a, taps_b = lens_cka.cka_heatmap(student, reference, x)
    reports.write_json(run.reports / "cka.json", {"matrix": mat.tolist(), "rows": taps_a, "cols": taps_b})
    reports.plot_heatmap(run.reports / "cka.png", mat, taps_a, taps_b)
    return {"diagonal_mean": float(np.mean(np.diag(mat))) if mat.shape[0] == mat.shape[1] else None}


def analyze_gist(opts: dict) -> dict:
    run, _, _, data_path, _ = _analysis_context(opts)
    if not data_path:
        raise ConfigError("gist needs --data")
    ds = load_training_data(data_path)
    if not isinstance(ds, PatchDataset):
        raise ConfigError("gist works on image patches")
    count = min(opts.get("count") or 1000, len(ds))
    counts, edges, d = lens_gist.gist_distance_histogram(list(ds.records[:count]), bins=opts.get("bins") or 50)
    modes = lens_gist.count_modes(counts)
    reports.write_json(run.reports / "gist.json", {
        "counts": counts.tolist(), "edges": edges.tolist(), "modes": modes,
        "min": float(d.min()), "max": float(d.max()), "mean": float(d.mean())})
    reports.plot_histograms(run.reports / "gist.png", {"patches": reports.Histogram(counts, edges)},
                            "GIST distance")
    return {"modes": modes, "min": float(d.min()), "max": float(d.max())}


def analyze_embed(opts: dict) -> dict:
    run, student, _, data_path, dataset = _analysis_context(opts)
    count = opts.get("count") or 2000
    x, labels = _eval_inputs(eval_set_for(dataset, count), count)
    if x is None:
        raise ConfigError("embed needs a labeled --dataset")
    feats = reports.penultimate_features(student, x)
    coords = reports.embed_2d(feats, seed=opts.get("seed") or 0)
    reports.write_embedding(run.reports / "embed.csv", coords, labels)
    reports.plot_scatter(run.reports / "embed.png", coords, labels)
    return {"points": len(coords)}


def analyze_perclass(opts: dict) -> dict:
    run, _, teacher, data_path, dataset = _analysis_context(opts)
    if teacher is None or not data_path:
        raise MissingPrerequisiteError("perclass needs the run's teacher and training data")
    report = reports.per_class_report(read_metrics(run.metrics), teacher, load_training_data(data_path))
    reports.write_json(run.reports / "perclass.json", report)
    pts = np.array([[s["frequency"], s["final_top1"]] for s in report["scatter"]], dtype=float)
    reports.plot_scatter(run.reports / "perclass.png", pts, xlabel="teacher top-1 frequency",
                         ylabel="student class accuracy")
    return {"classes": len(report["scatter"])}


ANALYSES = {
    "confidence": analyze_confidence,
    "cka": analyze_cka,
    "gist": analyze_gist,
    "embed": analyze_embed,
    "perclass": analyze_perclass,
}
