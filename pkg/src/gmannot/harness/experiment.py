"""Experiment front door: build the world, train the chosen method,
evaluate, and leave a reproducible run directory behind.

Run directory layout:
    config.json        resolved config snapshot (reproduces the run)
    metrics.jsonl      one record per step, deterministic fields only
    timings.jsonl      per-step wall-clock, kept apart so metrics stay
                       byte-reproducible
    annotator.ckpt     best-validation annotator
    annotator_final.ckpt
    segmentor.ckpt     (gm/maml) final inner-loop segmentor
    report.json        headline numbers and hashes
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..baselines import (
    PseudoConfig,
    train_maml,
    train_pseudo_labeling,
    train_supervised_annotator,
)
from ..gmtrain import GmConfig, MetricsRecord, gm_train, make_validation_samples
from ..metrics import eval_annotator
from ..models import SegmentorArch, build_annotator, init_model, save_model
from ..substrate import stable_hash
from ..world import LatentStream, assert_disjoint_streams, make_labeled_set
from .config import ConfigError, ExperimentConfig
from .datasets import label_with_annotator
from .downstream import make_test_samples, train_downstream

RUN_ROOT_ENV = "GMANNOT_RUN_ROOT"


class ExperimentError(RuntimeError):
    pass


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _derived_seed(tag: str, seed: int) -> int:
    return stable_hash(tag, seed) % (2**31)


def write_metrics_jsonl(records: Sequence[MetricsRecord], path: Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


def write_timings_jsonl(records: Sequence[MetricsRecord], path: Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"step": rec.step, "wall_ms": rec.wall_ms}) + "\n")


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Train per `config.method`, evaluate, write the run directory; returns
    its path."""
    t_start = time.perf_counter()
    cfg_hash = config.config_hash()
    out = Path(out_dir or config.out_dir or
               run_root() / f"{config.method}-{cfg_hash}-s{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))

    world_cfg = config.world
    seed = config.seed
    streams = [
        LatentStream(f"labeled-{config.labeled.mode}", config.labeled.seed, world_cfg.latent_dim),
        LatentStream("train", seed, world_cfg.latent_dim),
        LatentStream("validation", seed, world_cfg.latent_dim),
        LatentStream("test", seed, world_cfg.latent_dim),
    ]
    assert_disjoint_streams(streams)

    labeled = make_labeled_set(world_cfg, config.labeled.n, config.labeled.mode,
                               config.labeled.seed)
    validation = make_validation_samples(world_cfg, seed, config.gm.val_size)
    test = make_test_samples(world_cfg, seed, config.eval.test_size)

    ann_arch = build_annotator(world_cfg.pyramid_levels, world_cfg.feature_channels,
                               world_cfg.num_classes)
    ann_init = init_model(ann_arch, _derived_seed("annotator-init", seed))
    seg_arch = SegmentorArch(config.segmentor_arch, world_cfg.num_classes,
                             world_cfg.image_size)
    seg_init = init_model(seg_arch, _derived_seed("segmentor-init", seed))

    metrics: list[MetricsRecord] = []
    extra: dict = {}
    segmentor = None
    if config.method == "gm":
        gm_cfg = replace(config.gm, seed=seed)
        result = gm_train(gm_cfg, world_cfg, labeled, ann_arch, ann_init,
                          seg_arch, seg_init, validation=validation)
        annotator, metrics, segmentor = result.annotator, result.metrics, result.segmentor
        extra = {"best_val_miou": result.best_val_miou, "best_step": result.best_step,
                 "matched_layers": list(result.selection.layer_ids)}
        save_model(ann_arch, result.annotator_final, str(out / "annotator_final.ckpt"))
    elif config.method == "maml":
        maml_cfg = replace(config.maml, seed=seed)
        result = train_maml(maml_cfg, world_cfg, labeled, ann_arch, ann_init,
                            seg_arch, seg_init, validation=validation)
        annotator, metrics, segmentor = result.annotator, result.metrics, result.segmentor
        extra = {"best_val_miou": result.best_val_miou, "best_step": result.best_step,
                 "inner_steps": maml_cfg.inner_steps, "inner_lr": maml_cfg.inner_lr}
        save_model(ann_arch, result.annotator_final, str(out / "annotator_final.ckpt"))
    elif config.method == "pseudo":
        if config.labeled.mode == "synthetic":
            raise ExperimentError("pseudo-labeling reads images and masks only; "
                                  "use real or ood labeled mode")
        ps_cfg = replace(config.pseudo, seed=seed)
        annotator, info = train_pseudo_labeling(ps_cfg, world_cfg, labeled, ann_arch,
                                                ann_init, seg_arch, seg_init,
                                                validation=validation)
        extra = {"best_val_miou": info["best_val_miou"], "num_pseudo": info["num_pseudo"]}
    elif config.method == "supervised":
        if config.labeled.mode != "synthetic":
            raise ExperimentError("supervised annotator training needs synthetic-mode "
                                  "labels (features required)")
        sup = config.supervised
        annotator, metrics = train_supervised_annotator(
            labeled, ann_arch, ann_init, sup.steps, lr=sup.lr, momentum=sup.momentum,
            batch_size=sup.batch_size, seed=seed, validation=validation,
            eval_interval=sup.eval_interval)
    else:  # pragma: no cover - config validation rejects this earlier
        raise ExperimentError(f"unknown method {config.method!r}")

    write_metrics_jsonl(metrics, out / "metrics.jsonl")
    write_timings_jsonl(metrics, out / "timings.jsonl")
    save_model(ann_arch, annotator, str(out / "annotator.ckpt"),
               extra_meta={"config_hash": cfg_hash})
    if segmentor is not None:
        save_model(seg_arch, segmentor, str(out / "segmentor.ckpt"),
                   extra_meta={"config_hash": cfg_hash})

    fg_miou = eval_annotator(ann_arch, annotator, test,
                             include_background=config.eval.include_background)
    report = {
        "method": config.method,
        "config_hash": cfg_hash,
        "seed": seed,
        "labeled": {"n": config.labeled.n, "mode": config.labeled.mode,
                    "seed": config.labeled.seed},
        "final_fg_miou": fg_miou,
        "test_annotator_fg_miou": fg_miou,
        **extra,
    }
    if metrics:
        wall = sorted(r.wall_ms for r in metrics)
        report["timing"] = {"median_step_ms": wall[len(wall) // 2],
                            "total_s": sum(r.wall_ms for r in metrics) / 1e3}

    ds_spec = config.eval.downstream
    if ds_spec.enabled:
        dataset, _ = label_with_annotator(world_cfg, ann_arch, annotator,
                                          ds_spec.dataset_size,
                                          _derived_seed("export", seed))
        down_arch = SegmentorArch(ds_spec.arch, world_cfg.num_classes, world_cfg.image_size)
        _, down_miou = train_downstream(dataset, down_arch, ds_spec.steps, test,
                                        lr=ds_spec.lr, momentum=ds_spec.momentum,
                                        batch_size=ds_spec.batch_size,
                                        seed=_derived_seed("downstream", seed),
                                        include_background=config.eval.include_background)
        report["downstream"] = {"arch": ds_spec.arch, "fg_miou": down_miou,
                                "dataset_size": ds_spec.dataset_size,
                                "steps": ds_spec.steps}
    report["wall_s"] = time.perf_counter() - t_start
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return out
