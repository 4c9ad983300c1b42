"""Segmentation metrics and model evaluation helpers."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .models import AnnotatorArch, ParamSet, SegmentorArch, images_to_torch, stack_pyramids
from .world import GenSample


class MetricsError(ValueError):
    pass


def _as_stack(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        return masks[None] if masks.ndim == 2 else masks
    return np.stack([np.asarray(m) for m in masks])


def miou(preds, gts, num_classes: int, include_background: bool = True) -> float:
    """Dataset-level mean IoU: intersections and unions accumulate over the
    whole set before dividing. Classes absent from both predictions and
    ground truth are skipped; include_background=False drops class 0.
    """
    p = _as_stack(preds)
    g = _as_stack(gts)
    if p.shape != g.shape:
        raise MetricsError(f"shape mismatch: preds {p.shape} vs gts {g.shape}")
    if p.min() < 0 or g.min() < 0 or p.max() >= num_classes or g.max() >= num_classes:
        raise MetricsError(f"class indices must lie in [0, {num_classes})")
    first = 0 if include_background else 1
    ious = []
    for c in range(first, num_classes):
        pc, gc = p == c, g == c
        union = np.logical_or(pc, gc).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(pc, gc).sum() / union)
    if not ious:
        raise MetricsError("no classes present in either preds or gts")
    return float(np.mean(ious))


def eval_annotator(arch: AnnotatorArch, params: ParamSet, samples: Sequence[GenSample],
                   *, include_background: bool = False, batch: int = 8) -> float:
    """Annotator-vs-oracle mIoU on generator samples (argmax predictions)."""
    preds, gts = [], []
    dtype = params.dtype
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        pyr = stack_pyramids([[torch.from_numpy(lv).to(dtype) for lv in s.h] for s in chunk])
        with torch.no_grad():
            logits = arch.forward(params.values, pyr)
        preds.extend(logits.argmax(dim=1).numpy())
        gts.extend(s.y_star for s in chunk)
    return miou(preds, gts, arch.num_classes, include_background=include_background)


def eval_segmentor(arch: SegmentorArch, params: ParamSet, samples: Sequence[GenSample],
                   *, include_background: bool = False, batch: int = 8) -> float:
    """Segmentor-vs-oracle mIoU on generator samples."""
    preds, gts = [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x = images_to_torch([s.x for s in chunk], params.dtype)
        with torch.no_grad():
            logits = arch.forward(params.values, x)
        preds.extend(logits.argmax(dim=1).numpy())
        gts.extend(s.y_star for s in chunk)
    return miou(preds, gts, arch.num_classes, include_background=include_background)
