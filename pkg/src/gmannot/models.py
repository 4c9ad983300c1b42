"""Model architectures: the feature-pyramid annotator and two small
segmentation networks. All forwards are pure functions of (values, input),
which keeps them usable with both reverse- and forward-mode differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .substrate import (
    LayerSpec,
    ParamSet,
    SubstrateError,
    avgpool2x,
    conv2d_same,
    init_params,
    load_checkpoint,
    relu,
    save_checkpoint,
    upsample2x,
)

SEGMENTOR_ARCHS = ("unet-s", "convstack")


class ModelError(ValueError):
    pass


def _conv_specs(layer_id: str, cin: int, cout: int, k: int, *, matchable: bool,
                group: str) -> list[LayerSpec]:
    return [
        LayerSpec(f"{layer_id}.w", "conv", (cout, cin, k, k), node_axis=0,
                  matchable=matchable, group=group),
        LayerSpec(f"{layer_id}.b", "bias", (cout,), node_axis=0, matchable=False, group=group),
    ]


def _conv(values: Mapping[str, torch.Tensor], layer_id: str, x: torch.Tensor) -> torch.Tensor:
    return conv2d_same(x, values[f"{layer_id}.w"], values[f"{layer_id}.b"])


@dataclass(frozen=True)
class AnnotatorArch:
    """FPN-style decoder over the generator's feature pyramid.

    Per-level 1x1 lateral convs to the fusion width, top-down 2x-upsample+add
    merges each followed by a 3x3 conv, and a head of two 3x3 convs plus a
    1x1 conv to class logits at full resolution.
    """

    levels: tuple[int, ...]
    in_channels: int
    num_classes: int
    fusion_width: int = 32

    def layer_specs(self) -> list[LayerSpec]:
        f = self.fusion_width
        specs: list[LayerSpec] = []
        for lv in self.levels:
            specs += _conv_specs(f"lateral{lv}", self.in_channels, f, 1,
                                 matchable=False, group="annotator")
            specs += _conv_specs(f"merge{lv}", f, f, 3, matchable=False, group="annotator")
        specs += _conv_specs("head1", f, f, 3, matchable=False, group="annotator")
        specs += _conv_specs("head2", f, f, 3, matchable=False, group="annotator")
        specs += _conv_specs("out", f, self.num_classes, 1, matchable=False, group="annotator")
        return specs

    def forward(self, values: Mapping[str, torch.Tensor],
                pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(pyramid) != len(self.levels):
            raise ModelError(f"expected {len(self.levels)} pyramid levels, got {len(pyramid)}")
        squeeze = pyramid[0].dim() == 3
        dtype = values["out.w"].dtype
        merged: torch.Tensor | None = None
        for lv, feat in zip(self.levels, pyramid):
            if feat.dim() == 3:
                feat = feat.unsqueeze(0)
            if feat.shape[-1] != lv or feat.shape[1] != self.in_channels:
                raise ModelError(
                    f"level {lv}: expected ({self.in_channels},{lv},{lv}), got {tuple(feat.shape[1:])}")
            lat = _conv(values, f"lateral{lv}", feat.to(dtype))
            top = lat if merged is None else lat + upsample2x(merged)
            merged = relu(_conv(values, f"merge{lv}", top))
        y = relu(_conv(values, "head1", merged))
        y = relu(_conv(values, "head2", y))
        logits = _conv(values, "out", y)
        return logits.squeeze(0) if squeeze else logits


@dataclass(frozen=True)
class SegmentorArch:
    """Image -> logits network; `unet-s` or `convstack`.

    input_resolution optionally pre-downsamples the image before the core
    network and nearest-upsamples the logits back to full resolution.
    """

    name: str
    num_classes: int
    image_size: int
    input_resolution: int | None = None

    def __post_init__(self) -> None:
        if self.name not in SEGMENTOR_ARCHS:
            raise ModelError(f"unknown segmentor arch {self.name!r}; choose from {SEGMENTOR_ARCHS}")
        res = self.effective_resolution
        scale = self.image_size // res
        if res * scale != self.image_size or scale & (scale - 1):
            raise ModelError("input_resolution must divide image_size by a power of two")
        if self.name == "unet-s" and res % 4 != 0:
            raise ModelError("unet-s needs an input resolution divisible by 4")

    @property
    def effective_resolution(self) -> int:
        return self.input_resolution or self.image_size

    def layer_specs(self) -> list[LayerSpec]:
        c = self.num_classes
        if self.name == "unet-s":
            enc = [(3, 16, "enc1a"), (16, 16, "enc1b"), (16, 32, "enc2a"), (32, 32, "enc2b"),
                   (32, 64, "enc3a"), (64, 64, "enc3b")]
            dec = [(64, 32, "dec2a"), (32, 32, "dec2b"), (32, 16, "dec1a"), (16, 16, "dec1b")]
            specs: list[LayerSpec] = []
            for cin, cout, lid in enc:
                specs += _conv_specs(lid, cin, cout, 3, matchable=True, group="encoder")
            for cin, cout, lid in dec:
                specs += _conv_specs(lid, cin, cout, 3, matchable=True, group="decoder")
            specs += _conv_specs("head", 16, c, 1, matchable=True, group="head")
            return specs
        specs = _conv_specs("c1", 3, 32, 3, matchable=True, group="backbone")
        for i in range(2, 7):
            specs += _conv_specs(f"c{i}", 32, 32, 3, matchable=True, group="backbone")
        specs += _conv_specs("head", 32, c, 1, matchable=True, group="head")
        return specs

    def _core(self, values: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        if self.name == "unet-s":
            e1 = relu(_conv(values, "enc1b", relu(_conv(values, "enc1a", x))))
            e2 = relu(_conv(values, "enc2b", relu(_conv(values, "enc2a", avgpool2x(e1)))))
            e3 = relu(_conv(values, "enc3b", relu(_conv(values, "enc3a", avgpool2x(e2)))))
            d2 = relu(_conv(values, "dec2a", upsample2x(e3))) + e2
            d2 = relu(_conv(values, "dec2b", d2))
            d1 = relu(_conv(values, "dec1a", upsample2x(d2))) + e1
            d1 = relu(_conv(values, "dec1b", d1))
            return _conv(values, "head", d1)
        y = x
        for i in range(1, 7):
            y = relu(_conv(values, f"c{i}", y))
        return _conv(values, "head", y)

    def forward(self, values: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != 3 or x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise ModelError(f"expected (3,{self.image_size},{self.image_size}) input, "
                             f"got {tuple(x.shape[1:])}")
        x = x.to(values["head.w"].dtype)
        size = self.image_size
        while size > self.effective_resolution:
            x = avgpool2x(x)
            size //= 2
        logits = self._core(values, x)
        while size < self.image_size:
            logits = upsample2x(logits)
            size *= 2
        return logits.squeeze(0) if squeeze else logits


Arch = AnnotatorArch | SegmentorArch


def init_model(arch: Arch, seed: int, dtype: str = "f32") -> ParamSet:
    """Deterministic He-uniform init (zeros for biases) keyed by seed."""
    return init_params(arch.layer_specs(), seed, dtype)


def annotator_forward(arch: AnnotatorArch, params: ParamSet,
                      pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
    return arch.forward(params.values, pyramid)


def segmentor_forward(arch: SegmentorArch, params: ParamSet, x: torch.Tensor) -> torch.Tensor:
    return arch.forward(params.values, x)


def soft_labels(logits: torch.Tensor, channel_axis: int = -3) -> torch.Tensor:
    """Channelwise softmax over logits; per-pixel distributions."""
    if not torch.isfinite(logits).all():
        raise ModelError("non-finite logits passed to soft_labels")
    return torch.softmax(logits, dim=channel_axis)


def _arch_meta(arch: Arch) -> dict:
    if isinstance(arch, AnnotatorArch):
        return {"model": "annotator", "levels": list(arch.levels),
                "in_channels": arch.in_channels, "num_classes": arch.num_classes,
                "fusion_width": arch.fusion_width}
    return {"model": arch.name, "num_classes": arch.num_classes,
            "image_size": arch.image_size, "input_resolution": arch.input_resolution}


def arch_from_meta(meta: Mapping[str, object]) -> Arch:
    kind = meta.get("model")
    if kind == "annotator":
        return AnnotatorArch(levels=tuple(meta["levels"]), in_channels=int(meta["in_channels"]),
                             num_classes=int(meta["num_classes"]),
                             fusion_width=int(meta["fusion_width"]))
    if kind in SEGMENTOR_ARCHS:
        res = meta.get("input_resolution")
        return SegmentorArch(name=str(kind), num_classes=int(meta["num_classes"]),
                             image_size=int(meta["image_size"]),
                             input_resolution=None if res is None else int(res))
    raise ModelError(f"checkpoint does not describe a known model: {kind!r}")


def save_model(arch: Arch, params: ParamSet, path: str,
               extra_meta: Mapping[str, object] | None = None) -> None:
    meta = _arch_meta(arch)
    meta.update(extra_meta or {})
    save_checkpoint(params, path, meta=meta)


def load_model(path: str) -> tuple[Arch, ParamSet, dict]:
    params, meta = load_checkpoint(path)
    return arch_from_meta(meta), params, meta


def build_annotator(levels: Sequence[int], in_channels: int, num_classes: int,
                    fusion_width: int = 32) -> AnnotatorArch:
    return AnnotatorArch(levels=tuple(levels), in_channels=in_channels,
                         num_classes=num_classes, fusion_width=fusion_width)


def pyramid_to_torch(h: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> list[torch.Tensor]:
    return [torch.from_numpy(np.ascontiguousarray(level)).to(dtype) for level in h]


def stack_pyramids(pyramids: Sequence[Sequence[torch.Tensor]]) -> list[torch.Tensor]:
    """Batch per-sample pyramids into one (B,C,l,l) tensor per level."""
    n_levels = len(pyramids[0])
    return [torch.stack([p[i] for p in pyramids], dim=0) for i in range(n_levels)]


def images_to_torch(xs: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.stack([torch.from_numpy(np.ascontiguousarray(x)).to(dtype) for x in xs], dim=0)


def masks_to_torch(ys: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.stack([torch.from_numpy(np.ascontiguousarray(y)).to(torch.int64) for y in ys], dim=0)
