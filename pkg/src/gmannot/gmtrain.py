"""Annotator learning by gradient matching.

The training signal for the annotator is the layerwise cosine distance
between two segmentor gradients: one taken on a small manually labeled
batch, one taken on a freshly generated batch labeled by the annotator.
The distance's exact gradient with respect to the annotator parameters is
available through two interchangeable routes:

  Strategy A: make the segmentor-gradient computation itself differentiable
      (second-order tape) and backpropagate through it.
  Strategy B: exploit that pixelwise cross-entropy is linear in its soft
      target. The distance's cotangent with respect to the synthetic
      gradient has a closed form per node; one forward-mode pass through
      log-softmax∘segmentor turns it into a per-pixel, per-class weight
      field; one reverse pass through the annotator on the weighted output
      finishes the job. No generic second-order machinery needed.

Both must agree to float precision, which the tests enforce.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .metrics import eval_annotator
from .models import (
    AnnotatorArch,
    SegmentorArch,
    images_to_torch,
    init_model,
    masks_to_torch,
    soft_labels,
    stack_pyramids,
)
from .substrate import (
    GradientBundle,
    OptState,
    ParamSet,
    SubstrateError,
    gather_classes,
    jvp_with_primal,
    log_softmax_channels,
    named_seed,
    sgd_step,
    stable_hash,
    value_and_grad,
)
from .substrate.params import LayerSpec
from .world import GenSample, LabeledSet, LatentStream, WorldConfig, sample_scene

STATE_POLICIES = ("alternate", "fixed", "random-reinit", "warmstart")
META_STRATEGIES = ("A", "B")
DEAD_NODE_EPS = 1e-16


class GmError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses


def pixel_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels (and batch) of -sum_c target_c * log softmax(logits)_c.

    Integer targets are hard class masks; float targets are per-pixel
    distributions with the same shape as logits. Linear in soft targets.
    """
    lsm = log_softmax_channels(logits, channel_axis=-3)
    if not target.is_floating_point():
        num_classes = logits.shape[-3]
        if target.min() < 0 or target.max() >= num_classes:
            raise GmError(f"hard target classes must lie in [0, {num_classes})")
        return -gather_classes(lsm, target).mean()
    if target.shape != logits.shape:
        raise GmError(f"soft target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
    return -(target.to(lsm.dtype) * lsm).sum(dim=-3).mean()


# ---------------------------------------------------------------------------
# layer selection


@dataclass(frozen=True)
class LayerSelection:
    """Subset of matchable segmentor layers entering the distance."""

    layer_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.layer_ids:
            raise GmError("layer selection must be nonempty")

    @staticmethod
    def resolve(params: ParamSet, policy: str | Sequence[str] = "all",
                include_biases: bool = False) -> "LayerSelection":
        """Policy is "all", a group tag, a list of group tags, or explicit ids.

        Only matchable layers qualify; biases join only on explicit request
        (sensitivity checks), norm-affine parameters never.
        """
        def eligible(spec: LayerSpec) -> bool:
            if spec.kind == "norm-affine":
                return False
            if spec.kind == "bias":
                return include_biases
            return spec.matchable

        candidates = [s for s in params.layers if eligible(s)]
        by_group = {s.layer_id for s in candidates}
        if policy == "all":
            chosen = [s.layer_id for s in candidates]
        else:
            wanted = [policy] if isinstance(policy, str) else list(policy)
            groups = {s.group for s in params.layers}
            chosen = []
            for item in wanted:
                if item in groups:
                    chosen += [s.layer_id for s in candidates if s.group == item]
                elif item in by_group:
                    chosen.append(item)
                else:
                    raise GmError(f"layer selection {item!r} names no matchable group or layer")
        if not chosen:
            raise GmError(f"layer selection {policy!r} selected nothing")
        return LayerSelection(tuple(dict.fromkeys(chosen)))


def _node_matrix(g: torch.Tensor, node_axis: int) -> torch.Tensor:
    if g.dim() == 0:
        return g.reshape(1, 1)
    return g.movedim(node_axis, 0).reshape(g.shape[node_axis], -1)


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    return sq.clamp_min(torch.finfo(sq.dtype).tiny).sqrt()


def layerwise_gradient_distance(g_a: GradientBundle, g_b: GradientBundle,
                                sel: LayerSelection, params: ParamSet) -> torch.Tensor:
    """Average over selected layers of the per-node cosine distance sum.

    Per layer: d = sum_j (1 - cos(A_j, B_j)) over node slices j; the result
    is mean(d_i) over selected layers. Node pairs whose norm product falls
    below DEAD_NODE_EPS contribute zero. Differentiable in g_b.
    """
    missing = [lid for lid in sel.layer_ids if lid not in g_a.values or lid not in g_b.values]
    if missing:
        raise GmError(f"gradient bundles lack selected layers {missing}")
    total: torch.Tensor | None = None
    for lid in sel.layer_ids:
        spec = params.spec(lid)
        a = _node_matrix(g_a.values[lid], spec.node_axis)
        b = _node_matrix(g_b.values[lid], spec.node_axis)
        if a.shape != b.shape:
            raise GmError(f"layer {lid!r}: misaligned gradient shapes")
        na = _safe_norm((a * a).sum(dim=1))
        nb = _safe_norm((b * b).sum(dim=1))
        prod = na * nb
        alive = (prod >= DEAD_NODE_EPS).detach()
        safe = torch.where(alive, prod, torch.ones_like(prod))
        cos = (a * b).sum(dim=1) / safe
        d = torch.where(alive, 1.0 - cos, torch.zeros_like(cos)).sum()
        total = d if total is None else total + d
    return total / len(sel.layer_ids)


def grad_distance_cotangent(g_a: GradientBundle, g_b: GradientBundle,
                            sel: LayerSelection, params: ParamSet) -> GradientBundle:
    """Closed-form dD/d(g_b): per node -(A_hat - cos * B_hat)/|B| / n_layers.

    Returns a bundle over the selected layers only; dead nodes get zeros.
    """
    out: dict[str, torch.Tensor] = {}
    n_layers = len(sel.layer_ids)
    for lid in sel.layer_ids:
        spec = params.spec(lid)
        ga = g_a.values[lid].detach()
        gb = g_b.values[lid].detach()
        a = _node_matrix(ga, spec.node_axis)
        b = _node_matrix(gb, spec.node_axis)
        na = _safe_norm((a * a).sum(dim=1))
        nb = _safe_norm((b * b).sum(dim=1))
        prod = na * nb
        alive = prod >= DEAD_NODE_EPS
        safe = torch.where(alive, prod, torch.ones_like(prod))
        cos = (a * b).sum(dim=1) / safe
        nb2 = torch.where(alive, nb * nb, torch.ones_like(nb))
        v = -(a / safe.unsqueeze(1) - (cos / nb2).unsqueeze(1) * b) / n_layers
        v = torch.where(alive.unsqueeze(1), v, torch.zeros_like(v))
        moved_shape = gb.movedim(spec.node_axis, 0).shape
        out[lid] = v.reshape(moved_shape).movedim(0, spec.node_axis)
    return GradientBundle(out)


# ---------------------------------------------------------------------------
# meta-gradient


AnnForward = Callable[[Mapping[str, torch.Tensor], Sequence[torch.Tensor]], torch.Tensor]


@dataclass
class MetaGradDiagnostics:
    l_gm: float
    l_l: float
    l_g: float


def _omega_leaves(omega: ParamSet) -> tuple[dict[str, torch.Tensor], list[str]]:
    ids = omega.ids()
    leaves = {lid: omega.values[lid].detach().requires_grad_(True) for lid in ids}
    return leaves, ids


def meta_grad(seg_arch: SegmentorArch, theta: ParamSet,
              ann_forward: AnnForward, omega: ParamSet,
              labeled_batch: tuple[torch.Tensor, torch.Tensor],
              synthetic_batch: tuple[torch.Tensor, Sequence[torch.Tensor]],
              sel: LayerSelection, strategy: str = "B",
              ) -> tuple[GradientBundle, MetaGradDiagnostics]:
    """Exact gradient of the matching distance w.r.t. annotator parameters.

    The labeled-batch gradient is treated as a constant. Both strategies
    return identical values up to float precision.
    """
    if strategy not in META_STRATEGIES:
        raise GmError(f"unknown meta-gradient strategy {strategy!r}")
    x_l, y_l = labeled_batch
    x_s, h_s = synthetic_batch
    if x_l.shape[0] == 0 or x_s.shape[0] == 0:
        raise GmError("meta_grad requires nonempty batches")
    sel_ids = list(sel.layer_ids)

    l_l, g_a = value_and_grad(
        lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_l), y_l),
        theta, wrt=sel_ids)
    g_a = g_a.detached()

    leaves, omega_ids = _omega_leaves(omega)
    ann_logits = ann_forward(leaves, h_s)
    a = soft_labels(ann_logits)

    if strategy == "A":
        l_g, g_b = value_and_grad(
            lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_s), a),
            theta, wrt=sel_ids, create_graph=True)
        l_gm = layerwise_gradient_distance(g_a, g_b, sel, theta)
        grads = torch.autograd.grad(l_gm, [leaves[i] for i in omega_ids], allow_unused=True)
    else:
        a_const = a.detach()
        l_g, g_b = value_and_grad(
            lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_s), a_const),
            theta, wrt=sel_ids)
        g_b = g_b.detached()
        l_gm = layerwise_gradient_distance(g_a, g_b, sel, theta)
        v = grad_distance_cotangent(g_a, g_b, sel, theta)
        _, jv = jvp_with_primal(
            lambda vals: log_softmax_channels(seg_arch.forward(vals, x_s), channel_axis=-3),
            theta, v, wrt=sel_ids)
        m = (-jv).detach()
        pseudo_loss = (a * m).sum(dim=-3).mean()
        grads = torch.autograd.grad(pseudo_loss, [leaves[i] for i in omega_ids], allow_unused=True)

    out = {lid: (g if g is not None else torch.zeros_like(leaves[lid])).detach()
           for lid, g in zip(omega_ids, grads)}
    if not all(torch.isfinite(g).all() for g in out.values()):
        raise GmError("non-finite meta-gradient")
    diag = MetaGradDiagnostics(l_gm=float(l_gm.detach()), l_l=float(l_l.detach()),
                               l_g=float(l_g.detach()))
    return GradientBundle(out), diag


# ---------------------------------------------------------------------------
# Taylor-reduction diagnostic


def taylor_residual_core(loss_labeled: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
                         loss_generated: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
                         params: ParamSet, eta: float) -> float:
    """L_l(theta - eta*gB) - [L_l(theta) - eta*<gA, gB>], the truncation error
    of the one-step-descent first-order expansion."""
    if eta < 0:
        raise GmError("eta must be nonnegative")
    l0, g_a = value_and_grad(loss_labeled, params)
    _, g_b = value_and_grad(loss_generated, params)
    shifted = {spec.layer_id: (params.values[spec.layer_id].detach()
                               - eta * g_b.values[spec.layer_id].detach())
               for spec, _ in params}
    l1 = loss_labeled(shifted)
    first_order = l0.detach() - eta * float(g_a.detached().dot(g_b.detached()))
    return float(l1.detach() - first_order)


def taylor_residual(seg_arch: SegmentorArch, theta: ParamSet,
                    ann_forward: AnnForward, omega: ParamSet,
                    labeled_batch: tuple[torch.Tensor, torch.Tensor],
                    synthetic_batch: tuple[torch.Tensor, Sequence[torch.Tensor]],
                    eta: float) -> float:
    x_l, y_l = labeled_batch
    x_s, h_s = synthetic_batch
    with torch.no_grad():
        a = soft_labels(ann_forward(omega.values, h_s))
    return taylor_residual_core(
        lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_l), y_l),
        lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_s), a),
        theta, eta)


def descent_probe(seg_arch: SegmentorArch, theta: ParamSet,
                  ann_forward: AnnForward, omega: ParamSet,
                  labeled_batch, synthetic_batch, eta: float) -> tuple[float, float]:
    """(first-order predicted change, realized change) of the labeled loss
    after one eta-step along the synthetic gradient."""
    x_l, y_l = labeled_batch
    x_s, h_s = synthetic_batch
    with torch.no_grad():
        a = soft_labels(ann_forward(omega.values, h_s))
    loss_l = lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_l), y_l)
    l0, g_a = value_and_grad(loss_l, theta)
    _, g_b = value_and_grad(
        lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x_s), a), theta)
    predicted = -eta * float(g_a.detached().dot(g_b.detached()))
    shifted = {spec.layer_id: params_val.detach() - eta * g_b.values[spec.layer_id].detach()
               for spec, params_val in theta}
    realized = float(loss_l(shifted).detach() - l0.detach())
    return predicted, realized


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class GmConfig:
    total_steps: int = 5000
    update_interval: int = 1
    batch_size: int = 2
    lr_annotator: float = 0.001
    lr_segmentor: float = 0.001
    momentum: float = 0.9
    layer_selection: str | tuple[str, ...] = "all"
    match_biases: bool = False
    meta_strategy: str = "B"
    state_policy: str = "alternate"
    warmstart_steps: int = 200
    input_resolution: int | None = None
    seed: int = 0
    val_size: int = 32
    eval_interval: int = 0  # 0 -> total_steps // 20, at least 25
    # Norm cap on the annotator update direction. Small nets produce
    # heavy-tailed matching gradients (cosine cotangents scale inversely
    # with per-node gradient norms); without a cap a single spiked step can
    # saturate the annotator softmax, which is unrecoverable. 0 disables.
    meta_grad_clip: float = 3.0

    def __post_init__(self) -> None:
        if self.total_steps < 1 or self.update_interval < 1 or self.batch_size < 1:
            raise GmError("total_steps, update_interval, and batch_size must be >= 1")
        if self.meta_strategy not in META_STRATEGIES:
            raise GmError(f"meta_strategy must be one of {META_STRATEGIES}")
        if self.state_policy not in STATE_POLICIES:
            raise GmError(f"state_policy must be one of {STATE_POLICIES}")
        if min(self.lr_annotator, self.lr_segmentor) <= 0 or not 0 <= self.momentum < 1:
            raise GmError("invalid optimizer hyperparameters")

    @property
    def effective_eval_interval(self) -> int:
        if self.eval_interval > 0:
            return self.eval_interval
        return max(25, self.total_steps // 20)


@dataclass
class MetricsRecord:
    step: int
    l_gm: float
    l_g: float | None
    l_l: float
    seg_updates: int
    annotator_miou: float | None = None
    wall_ms: float = 0.0

    def to_json_dict(self, include_timing: bool = False) -> dict:
        out = {"step": self.step, "l_gm": self.l_gm, "l_g": self.l_g, "l_l": self.l_l,
               "seg_updates": self.seg_updates, "annotator_miou": self.annotator_miou}
        if include_timing:
            out["wall_ms"] = self.wall_ms
        return out


class DataStreams:
    """Per-step batch source shared by the matching and MAML loops, so both
    consume identical labeled and latent sequences under identical seeds."""

    def __init__(self, world_cfg: WorldConfig, labeled_set: LabeledSet, seed: int,
                 batch_size: int, trace: bool = False):
        if len(labeled_set) == 0:
            raise GmError("labeled set must be nonempty")
        self.world_cfg = replace(world_cfg, ood=False)
        self.labeled_set = labeled_set
        self.batch_size = batch_size
        self._rng = named_seed("labeled-batches", seed)
        self.stream = LatentStream("train", seed, world_cfg.latent_dim)
        self.trace_log: list[tuple] | None = [] if trace else None

    def labeled_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self._rng.integers(0, len(self.labeled_set), size=self.batch_size)
        if self.trace_log is not None:
            self.trace_log.append(("labeled", tuple(int(i) for i in idx)))
        ex = [self.labeled_set.examples[i] for i in idx]
        return images_to_torch([e.x for e in ex]), masks_to_torch([e.y for e in ex])

    def synthetic_batch(self) -> tuple[torch.Tensor, list[torch.Tensor], list[GenSample]]:
        zs = self.stream.draw(self.batch_size)
        if self.trace_log is not None:
            self.trace_log.append(("synthetic", hash_latents(zs)))
        samples = [sample_scene(z, self.world_cfg) for z in zs]
        x = images_to_torch([s.x for s in samples])
        h = stack_pyramids([[torch.from_numpy(lv) for lv in s.h] for s in samples])
        return x, h, samples


def hash_latents(zs: np.ndarray) -> int:
    return stable_hash(np.asarray(zs, dtype=np.float64).tobytes().hex())


@dataclass
class GmTrainResult:
    annotator: ParamSet
    annotator_final: ParamSet
    segmentor: ParamSet
    metrics: list[MetricsRecord]
    best_val_miou: float
    best_step: int
    selection: LayerSelection


def make_validation_samples(world_cfg: WorldConfig, seed: int, n: int) -> list[GenSample]:
    stream = LatentStream("validation", seed, world_cfg.latent_dim)
    cfg = replace(world_cfg, ood=False)
    return [sample_scene(z, cfg) for z in stream.draw(n)]


def _supervised_warmstart(seg_arch: SegmentorArch, theta: ParamSet, labeled_set: LabeledSet,
                          steps: int, lr: float, momentum: float, batch_size: int,
                          seed: int) -> ParamSet:
    rng = named_seed("warmstart-batches", seed)
    opt = OptState.fresh(theta, lr=lr, momentum=momentum)
    for _ in range(steps):
        idx = rng.integers(0, len(labeled_set), size=batch_size)
        ex = [labeled_set.examples[i] for i in idx]
        x = images_to_torch([e.x for e in ex])
        y = masks_to_torch([e.y for e in ex])
        _, g = value_and_grad(lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x), y), theta)
        theta, opt = sgd_step(theta, g, opt)
    return theta


def gm_train(config: GmConfig, world_cfg: WorldConfig, labeled_set: LabeledSet,
             ann_arch: AnnotatorArch, ann_params: ParamSet,
             seg_arch: SegmentorArch, seg_params: ParamSet,
             *, validation: Sequence[GenSample] | None = None,
             trace_streams: bool = False) -> GmTrainResult:
    """Alternate annotator/segmentor training.

    Every step: matching gradient -> annotator update; every
    `update_interval` steps the segmentor takes one step on a fresh
    annotator-labeled batch (state policies vary this part). Checkpoint
    selection tracks held-out validation FG-mIoU of the annotator.
    """
    if seg_arch.input_resolution != config.input_resolution:
        seg_arch = replace(seg_arch, input_resolution=config.input_resolution)
    streams = DataStreams(world_cfg, labeled_set, config.seed, config.batch_size,
                          trace=trace_streams)
    sel = LayerSelection.resolve(seg_params, config.layer_selection, config.match_biases)
    omega, theta = ann_params, seg_params
    if config.state_policy == "warmstart":
        theta = _supervised_warmstart(seg_arch, theta, labeled_set, config.warmstart_steps,
                                      config.lr_segmentor, config.momentum,
                                      config.batch_size, config.seed)
    opt_a = OptState.fresh(omega, lr=config.lr_annotator, momentum=config.momentum)
    opt_s = OptState.fresh(theta, lr=config.lr_segmentor, momentum=config.momentum)
    if validation is None:
        validation = make_validation_samples(world_cfg, config.seed, config.val_size)

    metrics: list[MetricsRecord] = []
    best_val, best_step, best_params = -1.0, 0, omega.clone()
    seg_updates = 0
    eval_every = config.effective_eval_interval
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        labeled = streams.labeled_batch()
        x_s, h_s, _ = streams.synthetic_batch()
        g_omega, diag = meta_grad(seg_arch, theta, ann_arch.forward, omega,
                                  labeled, (x_s, h_s), sel, config.meta_strategy)
        if config.meta_grad_clip > 0:
            norm = float(g_omega.norm())
            if norm > config.meta_grad_clip:
                g_omega = g_omega.scale(config.meta_grad_clip / norm)
        omega, opt_a = sgd_step(omega, g_omega, opt_a)

        l_g_update: float | None = None
        if config.state_policy != "fixed" and step % config.update_interval == 0:
            if config.state_policy == "random-reinit":
                theta = init_model(seg_arch, stable_hash("reinit", config.seed, seg_updates))
                opt_s = OptState.fresh(theta, lr=config.lr_segmentor, momentum=config.momentum)
            else:
                x2, h2, _ = streams.synthetic_batch()
                with torch.no_grad():
                    a2 = soft_labels(ann_arch.forward(omega.values, h2))
                l_g_t, g_theta = value_and_grad(
                    lambda vals: pixel_cross_entropy(seg_arch.forward(vals, x2), a2), theta)
                theta, opt_s = sgd_step(theta, g_theta, opt_s)
                l_g_update = float(l_g_t.detach())
            seg_updates += 1

        record = MetricsRecord(step=step, l_gm=diag.l_gm,
                               l_g=l_g_update if l_g_update is not None else diag.l_g,
                               l_l=diag.l_l, seg_updates=seg_updates)
        if step % eval_every == 0 or step == config.total_steps:
            val_miou = eval_annotator(ann_arch, omega, validation)
            record.annotator_miou = val_miou
            if val_miou > best_val:
                best_val, best_step, best_params = val_miou, step, omega.clone()
        record.wall_ms = (time.perf_counter() - t0) * 1e3
        metrics.append(record)
    return GmTrainResult(annotator=best_params, annotator_final=omega, segmentor=theta,
                         metrics=metrics, best_val_miou=best_val, best_step=best_step,
                         selection=sel)
