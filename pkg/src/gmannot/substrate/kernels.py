"""The op vocabulary used by every model in this package.

Each kernel is a thin, deterministic wrapper around a torch primitive. The
registry exists so the finite-difference checker can enumerate exactly the
ops the models are built from (and so tests can register deliberately broken
ops to prove the checker catches them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .params import SubstrateError, torch_dtype


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def conv2d_same(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-1 convolution with zero same-padding; accepts (C,H,W) or (B,C,H,W)."""
    kh, kw = weight.shape[-2], weight.shape[-1]
    if kh % 2 != 1 or kw % 2 != 1:
        raise SubstrateError("conv2d_same requires odd kernel sizes")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    out = F.conv2d(x, weight, bias, stride=1, padding=(kh // 2, kw // 2))
    return out.squeeze(0) if squeeze else out


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor 2x upsample on the trailing two axes."""
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def avgpool2x(x: torch.Tensor) -> torch.Tensor:
    """2x average-pool downsample on the trailing two axes."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise SubstrateError(f"avgpool2x needs even spatial dims, got {(h, w)}")
    shape = x.shape[:-2] + (h // 2, 2, w // 2, 2)
    return x.reshape(shape).mean(dim=(-3, -1))


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def log_softmax_channels(x: torch.Tensor, channel_axis: int = -3) -> torch.Tensor:
    """Log-softmax over the channel axis of a (..., C, H, W) tensor."""
    return F.log_softmax(x, dim=channel_axis)


def sum_all(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def mean_all(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def gather_classes(x: torch.Tensor, index: torch.Tensor, channel_axis: int = -3) -> torch.Tensor:
    """Select per-pixel channel entries by integer class index.

    x is (..., C, H, W); index is (..., H, W) of ints in [0, C). Returns the
    (..., H, W) tensor x[..., index, h, w]. This is the lookup behind
    hard-label cross-entropy.
    """
    axis = channel_axis % x.dim()
    idx = index.unsqueeze(axis).to(torch.int64)
    return x.gather(axis, idx).squeeze(axis)


@dataclass(frozen=True)
class KernelCase:
    """A registered op plus a factory for FD-checkable sample inputs.

    make_inputs returns (differentiable_inputs, extra_kwargs); sampled points
    must sit away from any non-differentiable locus of the op.
    """

    name: str
    fn: Callable[..., torch.Tensor]
    make_inputs: Callable[[np.random.Generator, torch.dtype], tuple[tuple[torch.Tensor, ...], dict]]


def _t(rng: np.random.Generator, shape: tuple[int, ...], dtype: torch.dtype,
       low: float = -1.0, high: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, size=shape)).to(dtype)


def _relu_inputs(rng, dtype):
    x = _t(rng, (3, 4, 4), dtype)
    # keep a margin around the kink at zero
    x = torch.where(x.abs() < 0.05, x + 0.2, x)
    return (x,), {}


def _gather_inputs(rng, dtype):
    x = _t(rng, (5, 4, 4), dtype)
    idx = torch.from_numpy(rng.integers(0, 5, size=(4, 4)))
    return (x,), {"index": idx}


_DEFAULT_KERNELS: dict[str, KernelCase] = {}


def register_kernel(case: KernelCase, registry: dict[str, KernelCase] | None = None) -> None:
    target = _DEFAULT_KERNELS if registry is None else registry
    target[case.name] = case


def kernel_registry() -> dict[str, KernelCase]:
    return dict(_DEFAULT_KERNELS)


for _case in [
    KernelCase("add", add, lambda rng, dt: ((_t(rng, (3, 5), dt), _t(rng, (3, 5), dt)), {})),
    KernelCase("mul", mul, lambda rng, dt: ((_t(rng, (3, 5), dt), _t(rng, (3, 5), dt)), {})),
    KernelCase("matmul", matmul, lambda rng, dt: ((_t(rng, (3, 4), dt), _t(rng, (4, 2), dt)), {})),
    KernelCase("conv2d_same", conv2d_same,
               lambda rng, dt: ((_t(rng, (2, 3, 6, 6), dt), _t(rng, (4, 3, 3, 3), dt), _t(rng, (4,), dt)), {})),
    KernelCase("upsample2x", upsample2x, lambda rng, dt: ((_t(rng, (2, 3, 4, 4), dt),), {})),
    KernelCase("avgpool2x", avgpool2x, lambda rng, dt: ((_t(rng, (2, 3, 6, 6), dt),), {})),
    KernelCase("relu", relu, _relu_inputs),
    KernelCase("log_softmax_channels", log_softmax_channels,
               lambda rng, dt: ((_t(rng, (2, 5, 3, 3), dt),), {})),
    KernelCase("sum_all", sum_all, lambda rng, dt: ((_t(rng, (3, 4), dt),), {})),
    KernelCase("mean_all", mean_all, lambda rng, dt: ((_t(rng, (3, 4), dt),), {})),
    KernelCase("gather_classes", gather_classes, _gather_inputs),
]:
    register_kernel(_case)
