"""Downstream protocol: train a fresh segmentor on an annotator-labeled
dataset and score it against the oracle test stream."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
import torch

from ..gmtrain import pixel_cross_entropy
from ..metrics import eval_segmentor
from ..models import SegmentorArch, init_model
from ..substrate import OptState, ParamSet, named_seed, sgd_step, value_and_grad
from ..world import GenSample, LatentStream, WorldConfig, sample_scene
from .datasets import AnnotatedDataset, DatasetError


def make_test_samples(world_cfg: WorldConfig, seed: int, n: int) -> list[GenSample]:
    stream = LatentStream("test", seed, world_cfg.latent_dim)
    cfg = replace(world_cfg, ood=False, quality=1.0)
    return [sample_scene(z, cfg) for z in stream.draw(n)]


def train_downstream(dataset: AnnotatedDataset, arch: SegmentorArch, steps: int,
                     test_samples: Sequence[GenSample], *,
                     lr: float = 0.001, momentum: float = 0.9, batch_size: int = 2,
                     seed: int = 0, include_background: bool = False,
                     ) -> tuple[ParamSet, float]:
    """Train `arch` from scratch on (image, soft label) pairs; returns the
    trained parameters and their test FG-mIoU."""
    if len(dataset) == 0:
        raise DatasetError("cannot train downstream on an empty dataset")
    if steps < 1:
        raise DatasetError("downstream steps must be >= 1")
    images = torch.from_numpy(dataset.images)
    soft = torch.from_numpy(dataset.soft)
    params = init_model(arch, seed)
    opt = OptState.fresh(params, lr=lr, momentum=momentum)
    rng = named_seed("downstream-batches", seed, arch.name)
    for _ in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x = images[idx]
        t = soft[idx]
        _, g = value_and_grad(lambda v: pixel_cross_entropy(arch.forward(v, x), t), params)
        params, opt = sgd_step(params, g, opt)
    score = eval_segmentor(arch, params, test_samples, include_background=include_background)
    return params, score
