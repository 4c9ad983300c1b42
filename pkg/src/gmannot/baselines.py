"""Comparison methods: supervised-oracle annotator training, K-step MAML,
and the two-stage pseudo-labeling pipeline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from .gmtrain import (
    DataStreams,
    GmError,
    GmTrainResult,
    LayerSelection,
    MetricsRecord,
    make_validation_samples,
    pixel_cross_entropy,
)
from .metrics import eval_annotator
from .models import (
    AnnotatorArch,
    SegmentorArch,
    images_to_torch,
    masks_to_torch,
    soft_labels,
    stack_pyramids,
)
from .substrate import GradientBundle, OptState, ParamSet, named_seed, sgd_step, value_and_grad
from .world import GenSample, LabeledSet, LatentStream, WorldConfig, sample_scene


class BaselineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# supervised annotator (the oracle upper bound)


def train_supervised_annotator(labeled_set: LabeledSet, ann_arch: AnnotatorArch,
                               ann_params: ParamSet, steps: int, *,
                               lr: float = 0.001, momentum: float = 0.9,
                               batch_size: int = 2, seed: int = 0,
                               validation: Sequence[GenSample] | None = None,
                               eval_interval: int = 150,
                               ) -> tuple[ParamSet, list[MetricsRecord]]:
    """Minimize pixel CE of the annotator against ground-truth masks on a
    feature-bearing labeled set. Returns the best-validation checkpoint when
    a validation set is supplied, otherwise the final parameters."""
    if any(e.h is None for e in labeled_set.examples):
        raise BaselineError("supervised annotator training needs feature-bearing examples "
                            "(synthetic-mode labeled set)")
    rng = named_seed("supervised-batches", seed)
    params = ann_params
    opt = OptState.fresh(params, lr=lr, momentum=momentum)
    metrics: list[MetricsRecord] = []
    best_val, best_params = -1.0, params.clone()
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(labeled_set), size=batch_size)
        ex = [labeled_set.examples[i] for i in idx]
        h = stack_pyramids([[torch.from_numpy(lv) for lv in e.h] for e in ex])
        y = masks_to_torch([e.y for e in ex])
        loss, g = value_and_grad(lambda v: pixel_cross_entropy(ann_arch.forward(v, h), y), params)
        params, opt = sgd_step(params, g, opt)
        rec = MetricsRecord(step=step, l_gm=0.0, l_g=None, l_l=float(loss.detach()), seg_updates=0)
        if validation is not None and (step % eval_interval == 0 or step == steps):
            v = eval_annotator(ann_arch, params, validation)
            rec.annotator_miou = v
            if v > best_val:
                best_val, best_params = v, params.clone()
        rec.wall_ms = (time.perf_counter() - t0) * 1e3
        metrics.append(rec)
    return (best_params if validation is not None else params), metrics


# ---------------------------------------------------------------------------
# K-step MAML


@dataclass(frozen=True)
class MamlConfig:
    total_steps: int = 5000
    inner_steps: int = 1
    inner_lr: float = 0.1
    batch_size: int = 2
    lr_annotator: float = 0.001
    lr_segmentor: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    val_size: int = 32
    eval_interval: int = 0
    meta_grad_clip: float = 3.0

    def __post_init__(self) -> None:
        if self.inner_steps < 1:
            raise BaselineError("inner_steps must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise BaselineError("total_steps and batch_size must be >= 1")

    @property
    def effective_eval_interval(self) -> int:
        if self.eval_interval > 0:
            return self.eval_interval
        return max(25, self.total_steps // 20)


def maml_meta_grad(seg_arch: SegmentorArch, theta: ParamSet,
                   ann_forward, omega: ParamSet,
                   labeled_batch: tuple[torch.Tensor, torch.Tensor],
                   synthetic_batch: tuple[torch.Tensor, Sequence[torch.Tensor]],
                   inner_steps: int, inner_lr: float,
                   ) -> tuple[GradientBundle, float, float]:
    """Annotator gradient of the labeled meta-loss after differentiating
    through inner_steps of plain (momentum-free) SGD on a cloned segmentor.

    The single synthetic batch feeds every inner step; the real segmentor
    parameters are untouched.
    """
    x_l, y_l = labeled_batch
    x_s, h_s = synthetic_batch
    omega_ids = omega.ids()
    leaves = {lid: omega.values[lid].detach().requires_grad_(True) for lid in omega_ids}
    a = soft_labels(ann_forward(leaves, h_s))

    theta_ids = theta.ids()
    current = {lid: theta.values[lid].detach().requires_grad_(True) for lid in theta_ids}
    inner_losses: list[float] = []
    for _ in range(inner_steps):
        loss = pixel_cross_entropy(seg_arch.forward(current, x_s), a)
        inner_losses.append(float(loss.detach()))
        grads = torch.autograd.grad(loss, list(current.values()), create_graph=True,
                                    allow_unused=True)
        current = {lid: (p if g is None else p - inner_lr * g)
                   for (lid, p), g in zip(current.items(), grads)}
    meta_loss = pixel_cross_entropy(seg_arch.forward(current, x_l), y_l)
    grads = torch.autograd.grad(meta_loss, [leaves[i] for i in omega_ids], allow_unused=True)
    bundle = GradientBundle({lid: (g if g is not None else torch.zeros_like(leaves[lid])).detach()
                             for lid, g in zip(omega_ids, grads)})
    if not bundle.is_finite():
        raise BaselineError("non-finite MAML meta-gradient")
    return bundle, float(meta_loss.detach()), inner_losses[0]


def train_maml(config: MamlConfig, world_cfg: WorldConfig, labeled_set: LabeledSet,
               ann_arch: AnnotatorArch, ann_params: ParamSet,
               seg_arch: SegmentorArch, seg_params: ParamSet,
               *, validation: Sequence[GenSample] | None = None,
               trace_streams: bool = False) -> GmTrainResult:
    """Alternate annotator/segmentor training where the annotator update
    backpropagates through an unrolled inner loop instead of matching
    gradients. Consumes the same data streams as the matching loop."""
    streams = DataStreams(world_cfg, labeled_set, config.seed, config.batch_size,
                          trace=trace_streams)
    omega, theta = ann_params, seg_params
    opt_a = OptState.fresh(omega, lr=config.lr_annotator, momentum=config.momentum)
    opt_s = OptState.fresh(theta, lr=config.lr_segmentor, momentum=config.momentum)
    if validation is None:
        validation = make_validation_samples(world_cfg, config.seed, config.val_size)
    metrics: list[MetricsRecord] = []
    best_val, best_step, best_params = -1.0, 0, omega.clone()
    eval_every = config.effective_eval_interval
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        x_s, h_s, _ = streams.synthetic_batch()
        labeled = streams.labeled_batch()
        g_omega, meta_loss, l_g_inner = maml_meta_grad(
            seg_arch, theta, ann_arch.forward, omega, labeled, (x_s, h_s),
            config.inner_steps, config.inner_lr)
        if config.meta_grad_clip > 0:
            norm = float(g_omega.norm())
            if norm > config.meta_grad_clip:
                g_omega = g_omega.scale(config.meta_grad_clip / norm)
        omega, opt_a = sgd_step(omega, g_omega, opt_a)

        x2, h2, _ = streams.synthetic_batch()
        with torch.no_grad():
            a2 = soft_labels(ann_arch.forward(omega.values, h2))
        l_g_t, g_theta = value_and_grad(
            lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x2), a2), theta)
        theta, opt_s = sgd_step(theta, g_theta, opt_s)

        rec = MetricsRecord(step=step, l_gm=meta_loss, l_g=float(l_g_t.detach()),
                            l_l=meta_loss, seg_updates=step)
        if step % eval_every == 0 or step == config.total_steps:
            v = eval_annotator(ann_arch, omega, validation)
            rec.annotator_miou = v
            if v > best_val:
                best_val, best_step, best_params = v, step, omega.clone()
        rec.wall_ms = (time.perf_counter() - t0) * 1e3
        metrics.append(rec)
    sel = LayerSelection(tuple(s.layer_id for s in seg_params.matchable_layers()))
    return GmTrainResult(annotator=best_params, annotator_final=omega, segmentor=theta,
                         metrics=metrics, best_val_miou=best_val, best_step=best_step,
                         selection=sel)


# ---------------------------------------------------------------------------
# pseudo-labeling


@dataclass(frozen=True)
class PseudoConfig:
    segmentor_steps: int = 1200
    num_pseudo: int = 96
    annotator_steps: int = 1500
    batch_size: int = 2
    lr: float = 0.001
    momentum: float = 0.9
    soft_pseudo_labels: bool = False
    seed: int = 0


def train_segmentor_supervised(labeled_set: LabeledSet, seg_arch: SegmentorArch,
                               seg_params: ParamSet, steps: int, *,
                               lr: float = 0.001, momentum: float = 0.9,
                               batch_size: int = 2, seed: int = 0) -> ParamSet:
    rng = named_seed("pseudo-stage1", seed)
    params, opt = seg_params, OptState.fresh(seg_params, lr=lr, momentum=momentum)
    for _ in range(steps):
        idx = rng.integers(0, len(labeled_set), size=batch_size)
        ex = [labeled_set.examples[i] for i in idx]
        x = images_to_torch([e.x for e in ex])
        y = masks_to_torch([e.y for e in ex])
        _, g = value_and_grad(lambda v: pixel_cross_entropy(seg_arch.forward(v, x), y), params)
        params, opt = sgd_step(params, g, opt)
    return params


def predict_masks(seg_arch: SegmentorArch, seg_params: ParamSet,
                  images: Sequence[np.ndarray], *, batch: int = 8,
                  soft: bool = False) -> list[np.ndarray] | list[torch.Tensor]:
    """Stage-two labeler: consumes images only, never oracle masks."""
    out: list = []
    for i in range(0, len(images), batch):
        x = images_to_torch(images[i:i + batch], seg_params.dtype)
        with torch.no_grad():
            logits = seg_arch.forward(seg_params.values, x)
        if soft:
            out.extend(soft_labels(logits))
        else:
            out.extend(logits.argmax(dim=1).numpy())
    return out


def train_pseudo_labeling(config: PseudoConfig, world_cfg: WorldConfig,
                          labeled_set: LabeledSet,
                          ann_arch: AnnotatorArch, ann_params: ParamSet,
                          seg_arch: SegmentorArch, seg_params: ParamSet,
                          *, validation: Sequence[GenSample] | None = None,
                          ) -> tuple[ParamSet, dict]:
    """(i) supervise a segmentor on the labeled set, (ii) pseudo-label
    generated images with it, (iii) supervise the annotator on
    (features, pseudo mask) pairs."""
    if len(labeled_set) == 0:
        raise BaselineError("labeled set must be nonempty")
    gen_cfg = replace(world_cfg, ood=False)
    stage1 = train_segmentor_supervised(labeled_set, seg_arch, seg_params,
                                        config.segmentor_steps, lr=config.lr,
                                        momentum=config.momentum,
                                        batch_size=config.batch_size, seed=config.seed)
    stream = LatentStream("pseudo-data", config.seed, world_cfg.latent_dim)
    samples = [sample_scene(z, gen_cfg) for z in stream.draw(config.num_pseudo)]
    pseudo = predict_masks(seg_arch, stage1, [s.x for s in samples],
                           soft=config.soft_pseudo_labels)

    rng = named_seed("pseudo-stage3", config.seed)
    params, opt = ann_params, OptState.fresh(ann_params, lr=config.lr, momentum=config.momentum)
    best_val, best_params = -1.0, params.clone()
    for step in range(1, config.annotator_steps + 1):
        idx = rng.integers(0, len(samples), size=config.batch_size)
        h = stack_pyramids([[torch.from_numpy(lv) for lv in samples[i].h] for i in idx])
        if config.soft_pseudo_labels:
            target = torch.stack([pseudo[i] for i in idx])
        else:
            target = masks_to_torch([pseudo[i] for i in idx])
        _, g = value_and_grad(lambda v: pixel_cross_entropy(ann_arch.forward(v, h), target), params)
        params, opt = sgd_step(params, g, opt)
        if validation is not None and step % 150 == 0:
            v = eval_annotator(ann_arch, params, validation)
            if v > best_val:
                best_val, best_params = v, params.clone()
    if validation is not None:
        params = best_params
    info = {"stage1_segmentor": stage1, "num_pseudo": config.num_pseudo,
            "best_val_miou": best_val}
    return params, info
