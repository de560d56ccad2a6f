"""``onedatum`` command line.

Exit status: 0 on success, 1 for configuration errors (bad flags or config
file, missing prerequisites), 2 for failures at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from onedatum import __version__
from onedatum.cli.config import BUDGETS, load_config_file, merge
from onedatum.errors import ConfigError, MissingPrerequisiteError, PreconditionError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _flag(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def _switch(p, name, help):
    p.add_argument(name, action="store_const", const=True, default=None, help=help)


def _distill_flags(p, data_required=True):
    _flag(p, "--data", required=data_required, help="directory written by gen-patches or gen-audio")
    _flag(p, "--arch", help="student architecture (default: same as the teacher)")
    _flag(p, "--temperature", type=float)
    _flag(p, "--loss", choices=("kl", "l1", "l2"))
    _flag(p, "--signal", help="full, hard or topK (e.g. top5)")
    _flag(p, "--mix", choices=("none", "mixup", "cutmix"))
    _flag(p, "--epochs", type=int)
    _flag(p, "--seed", type=int)
    _flag(p, "--batch-size", dest="batch_size", type=int)
    _flag(p, "--lr", type=float)
    _flag(p, "--optimizer", choices=("adam", "adamw", "sgd"))
    _flag(p, "--max-steps", dest="max_steps", type=int)
    _flag(p, "--preset", help="small-scale (default), large-scale or audio")
    _flag(p, "--budget", choices=BUDGETS, help="pilot (30 epochs, default) or paper (1000 epochs)")
    _flag(p, "--dataset", help="evaluation set: cifar10, cifar100, speechcommands, npz:PATH or none")
    _flag(p, "--eval-limit", dest="eval_limit", type=int, help="evaluate on the first K test examples")
    _switch(p, "--log-per-class", "record per-class accuracy every epoch")
    _switch(p, "--no-standard-aug", "disable flip/crop on patches")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="onedatum", description="Knowledge distillation from a single image or audio clip.")
    parser.add_argument("--version", action="version", version=f"onedatum {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-patches", help="augmented patch dataset from one image")
    _flag(p, "--image", required=True, help="image path or stock:NAME")
    _flag(p, "--size", type=int, default=32)
    _flag(p, "--count", type=int, default=50_000)
    _flag(p, "--seed", type=int, default=0)
    _flag(p, "--workers", type=int, default=1)
    _flag(p, "--out", required=True)
    p.add_argument("--png", action="store_true", help="also write each patch as PNG")

    p = sub.add_parser("gen-audio", help="augmented clip dataset from one recording")
    _flag(p, "--clip", required=True, help="WAV file")
    _flag(p, "--count", type=int, default=50_000)
    _flag(p, "--segment-seconds", dest="segment_seconds", type=float, default=2.0)
    _flag(p, "--seed", type=int, default=0)
    _flag(p, "--out", required=True)

    p = sub.add_parser("train-teacher", help="supervised teacher training")
    _flag(p, "--dataset", help="cifar10 (default), cifar100, speechcommands or npz:PATH")
    _flag(p, "--arch")
    _flag(p, "--preset", help="auto (default), resnet-vgg, wideresnet or audio")
    _flag(p, "--budget", choices=BUDGETS)
    _flag(p, "--epochs", type=int, help="override the preset length, in logging epochs")
    _flag(p, "--total-steps", dest="total_steps", type=int)
    _flag(p, "--batch-size", dest="batch_size", type=int)
    _flag(p, "--seed", type=int)
    _flag(p, "--eval-limit", dest="eval_limit", type=int)
    _flag(p, "--config", help="YAML/JSON options file")
    _flag(p, "--out", required=True)

    p = sub.add_parser("distill", help="train a student on generated data against a teacher")
    _flag(p, "--teacher", help="teacher checkpoint")
    _distill_flags(p, data_required=False)
    _flag(p, "--data-limit", dest="data_limit", type=int, help="use the first N records only")
    _flag(p, "--config", help="YAML/JSON options file")
    _flag(p, "--out")

    p = sub.add_parser("compress", help="prune or quantize a model, then self-distill")
    _flag(p, "--model", help="checkpoint to compress")
    _flag(p, "--method", choices=("prune", "quantize"))
    _flag(p, "--sparsity", type=float)
    _distill_flags(p, data_required=False)
    _flag(p, "--config", help="YAML/JSON options file")
    _flag(p, "--out")

    p = sub.add_parser("analyze", help="reports on a finished run")
    p.add_argument("kind", choices=("confidence", "cka", "gist", "embed", "perclass"))
    _flag(p, "--run", required=True)
    _flag(p, "--model", help="checkpoint to analyze (default: the run's model)")
    _flag(p, "--teacher")
    _flag(p, "--reference", help="second model for cka (default: the run's teacher)")
    _flag(p, "--data")
    _flag(p, "--dataset")
    _flag(p, "--count", type=int)
    _flag(p, "--tau", type=float)
    _flag(p, "--bins", type=int)
    _flag(p, "--seed", type=int)

    p = sub.add_parser("grid", help="run an ablation grid")
    p.add_argument("grid", choices=("source-image", "dataset-size", "augmentation", "signal", "loss"))
    _flag(p, "--teacher")
    _distill_flags(p, data_required=False)
    _flag(p, "--patches-root", dest="patches_root", help="one gen-patches directory per source image")
    _flag(p, "--cells", help="comma-separated subset of cells")
    _flag(p, "--parallel", type=int, default=1)
    _flag(p, "--config", help="YAML/JSON options file")
    _flag(p, "--out")
    return parser


def _options(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config", "kind")}
    if flags.pop("no_standard_aug", None):
        flags["standard_aug"] = False
    return merge(load_config_file(getattr(args, "config", None)), flags)


def dispatch(args: argparse.Namespace) -> dict:
    from onedatum.cli import runs

    opts = _options(args)
    if args.command == "gen-patches":
        return runs.run_gen_patches(opts)
    if args.command == "gen-audio":
        return runs.run_gen_audio(opts)
    if args.command == "train-teacher":
        return runs.run_train_teacher(opts)
    if args.command == "distill":
        return runs.run_distill(opts)
    if args.command == "compress":
        return runs.run_compress(opts)
    if args.command == "analyze":
        return runs.ANALYSES[args.kind](opts)
    if args.command == "grid":
        from onedatum.cli.grid import run_ablation

        cells = opts.pop("cells", None)
        parallel = opts.pop("parallel", 1)
        return run_ablation(args.grid, opts, parallel=parallel,
                            cells=cells.split(",") if isinstance(cells, str) else cells)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except (ConfigError, PreconditionError, MissingPrerequisiteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; re-run the same command to resume", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        logging.getLogger("onedatum").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
