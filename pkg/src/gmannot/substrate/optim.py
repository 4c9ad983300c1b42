"""Classical SGD with momentum: v <- mu*v + g; theta <- theta - lr*v."""

from __future__ import annotations

import torch

from .params import GradientBundle, OptState, ParamSet, SubstrateError


def sgd_step(params: ParamSet, grads: GradientBundle, state: OptState) -> tuple[ParamSet, OptState]:
    """One deterministic optimizer step; returns fresh params and state."""
    grads.check_aligned(params)
    if not grads.is_finite():
        raise SubstrateError("non-finite gradients passed to sgd_step")
    new_vals: dict[str, torch.Tensor] = {}
    new_bufs: dict[str, torch.Tensor] = {}
    for spec, val in params:
        g = grads.values[spec.layer_id].detach()
        v = state.momentum * state.buffers[spec.layer_id] + g
        new_bufs[spec.layer_id] = v
        new_vals[spec.layer_id] = val.detach() - state.lr * v
    return ParamSet(list(params.layers), new_vals), OptState(state.lr, state.momentum, new_bufs)
