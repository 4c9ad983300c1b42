"""Command-line front end.

Failures print a machine-readable error JSON on stderr and exit nonzero
(2 for configuration problems, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .. import __version__


def _load_cfg(args) -> "ExperimentConfig":
    from .config import ExperimentConfig, apply_overrides, config_from_dict, load_config

    if args.config:
        return load_config(args.config, args.set or [])
    return config_from_dict(apply_overrides({}, args.set or []))


def _cmd_world_describe(args) -> int:
    from ..world import describe_world

    cfg = _load_cfg(args)
    print(json.dumps(describe_world(cfg.world), indent=1))
    return 0


def _cmd_train(args) -> int:
    from .experiment import run_experiment

    cfg = _load_cfg(args)
    run_dir = run_experiment(cfg, out_dir=args.out)
    report = json.loads((Path(run_dir) / "report.json").read_text())
    print(json.dumps({"run_dir": str(run_dir), "report": report}, indent=1))
    return 0


def _cmd_eval(args) -> int:
    from ..metrics import eval_annotator, eval_segmentor
    from ..models import AnnotatorArch, SegmentorArch, load_model
    from .downstream import make_test_samples

    cfg = _load_cfg(args)
    arch, params, _meta = load_model(args.checkpoint)
    test = make_test_samples(cfg.world, cfg.seed, cfg.eval.test_size)
    include_bg = cfg.eval.include_background
    if isinstance(arch, AnnotatorArch):
        score = eval_annotator(arch, params, test, include_background=include_bg)
        kind = "annotator"
    else:
        score = eval_segmentor(arch, params, test, include_background=include_bg)
        kind = arch.name
    print(json.dumps({"checkpoint": args.checkpoint, "model": kind,
                      "test_size": cfg.eval.test_size,
                      "fg_miou" if not include_bg else "miou": score}, indent=1))
    return 0


def _cmd_export_dataset(args) -> int:
    from ..models import AnnotatorArch, load_model
    from .datasets import export_dataset

    cfg = _load_cfg(args)
    arch, params, _meta = load_model(args.checkpoint)
    if not isinstance(arch, AnnotatorArch):
        raise ValueError("export-dataset needs an annotator checkpoint")
    manifest = export_dataset(cfg.world, arch, params, args.n, args.seed, args.out)
    print(json.dumps({"out_dir": args.out, "manifest": manifest.to_dict()}, indent=1))
    return 0


def _cmd_downstream(args) -> int:
    from ..models import SegmentorArch
    from .datasets import load_dataset
    from .downstream import make_test_samples, train_downstream

    cfg = _load_cfg(args)
    dataset, manifest = load_dataset(args.dataset)
    arch = SegmentorArch(args.arch, cfg.world.num_classes, cfg.world.image_size)
    test = make_test_samples(cfg.world, cfg.seed, cfg.eval.test_size)
    _, score = train_downstream(dataset, arch, args.steps, test,
                                seed=args.seed,
                                include_background=cfg.eval.include_background)
    print(json.dumps({"dataset": args.dataset, "arch": args.arch, "steps": args.steps,
                      "fg_miou": score, "dataset_count": manifest.count}, indent=1))
    return 0


def _cmd_plot(args) -> int:
    from .plots import plot_curves, plot_metrics

    if len(args.metrics) == 1 and not args.labels:
        written = plot_metrics(args.metrics[0], args.out,
                               keys=args.keys.split(",") if args.keys else
                               ("l_gm", "l_l", "l_g", "annotator_miou"))
        print(json.dumps({"written": [str(p) for p in written]}, indent=1))
        return 0
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name for p in args.metrics]
    key = (args.keys or "annotator_miou").split(",")[0]
    out = Path(args.out) / f"{key}_sweep.svg"
    plot_curves(args.metrics, labels, key, out)
    print(json.dumps({"written": [str(out)]}, indent=1))
    return 0


def _cmd_check_grads(args) -> int:
    from ..substrate import check_all_kernels, check_gradients

    if args.ops:
        reports = [check_gradients(op, trials=args.trials, tol=args.tol)
                   for op in args.ops.split(",")]
    else:
        reports = check_all_kernels(trials=args.trials, tol=args.tol)
    for rep in reports:
        print(rep.summary())
    if any(not r.passed for r in reports):
        print(json.dumps({"error": {"type": "gradient-check",
                                    "message": "one or more kernels failed"}}), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmannot",
                                     description="Gradient-matched annotator training "
                                                 "on a procedural segmentation world.")
    parser.add_argument("--version", action="version", version=f"gmannot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_cfg_args(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config field, e.g. gm.total_steps=2000")

    world = sub.add_parser("world", help="world inspection").add_subparsers(
        dest="world_command", required=True)
    describe = world.add_parser("describe", help="print class names, shapes, channels")
    add_cfg_args(describe)
    describe.set_defaults(fn=_cmd_world_describe)

    train = sub.add_parser("train", help="run a training experiment")
    add_cfg_args(train)
    train.add_argument("--out", help="run directory (default: $GMANNOT_RUN_ROOT/auto)")
    train.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test stream")
    add_cfg_args(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.set_defaults(fn=_cmd_eval)

    exp = sub.add_parser("export-dataset", help="label fresh scenes with a trained annotator")
    add_cfg_args(exp)
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--n", type=int, default=64)
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--out", required=True)
    exp.set_defaults(fn=_cmd_export_dataset)

    down = sub.add_parser("downstream", help="train a segmentor on an exported dataset")
    add_cfg_args(down)
    down.add_argument("--dataset", required=True)
    down.add_argument("--arch", default="unet-s", choices=("unet-s", "convstack"))
    down.add_argument("--steps", type=int, default=1200)
    down.add_argument("--seed", type=int, default=0)
    down.set_defaults(fn=_cmd_downstream)

    plot = sub.add_parser("plot", help="render metrics JSONL to CSV + SVG")
    plot.add_argument("--metrics", nargs="+", required=True)
    plot.add_argument("--out", required=True)
    plot.add_argument("--keys", help="comma-separated metric keys")
    plot.add_argument("--labels", help="comma-separated curve labels (sweep mode)")
    plot.set_defaults(fn=_cmd_plot)

    cg = sub.add_parser("check-grads", help="finite-difference check registered kernels")
    cg.add_argument("--trials", type=int, default=3)
    cg.add_argument("--tol", type=float, default=1e-4)
    cg.add_argument("--ops", help="comma-separated op names (default: all)")
    cg.set_defaults(fn=_cmd_check_grads)
    return parser


def main(argv: list[str] | None = None) -> int:
    from ..gmtrain import GmError
    from ..metrics import MetricsError
    from ..models import ModelError
    from ..substrate import CheckpointError, SubstrateError
    from ..world import WorldError
    from .config import ConfigError
    from .datasets import DatasetError
    from .plots import PlotError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": "config", "path": exc.path,
                                    "message": str(exc)}}), file=sys.stderr)
        return 2
    except (WorldError, ModelError, GmError, MetricsError, DatasetError, PlotError,
            SubstrateError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
