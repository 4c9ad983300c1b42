"""Reverse-mode gradients, forward-mode directional derivatives, and the
finite-difference checker that keeps both honest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .kernels import KernelCase, kernel_registry
from .params import GradientBundle, ParamSet, SubstrateError

LossFn = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


def _split_leaves(params: ParamSet, wrt: Sequence[str] | None):
    wrt_ids = params.ids() if wrt is None else list(wrt)
    unknown = set(wrt_ids) - set(params.ids())
    if unknown:
        raise SubstrateError(f"unknown layer ids in wrt: {sorted(unknown)}")
    leaves: dict[str, torch.Tensor] = {}
    values: dict[str, torch.Tensor] = {}
    for spec, val in params:
        if spec.layer_id in wrt_ids:
            leaf = val.detach().requires_grad_(True)
            leaves[spec.layer_id] = leaf
            values[spec.layer_id] = leaf
        else:
            values[spec.layer_id] = val.detach()
    return wrt_ids, leaves, values


def value_and_grad(loss_fn: LossFn, params: ParamSet, *, wrt: Sequence[str] | None = None,
                   create_graph: bool = False) -> tuple[torch.Tensor, GradientBundle]:
    """Evaluate a scalar loss and its exact reverse-mode gradients.

    Parameters that do not participate in the graph get zero gradients. The
    input ParamSet is never mutated.
    """
    wrt_ids, leaves, values = _split_leaves(params, wrt)
    loss = loss_fn(values)
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise SubstrateError("loss must evaluate to a scalar tensor")
    if not torch.isfinite(loss.detach()).all():
        raise SubstrateError("non-finite loss encountered during forward pass")
    grads = torch.autograd.grad(loss, [leaves[i] for i in wrt_ids],
                                create_graph=create_graph, allow_unused=True)
    out = {}
    for lid, g in zip(wrt_ids, grads):
        out[lid] = torch.zeros_like(leaves[lid]) if g is None else g
    return loss, GradientBundle(out)


def grad(loss_fn: LossFn, params: ParamSet, *, wrt: Sequence[str] | None = None) -> GradientBundle:
    return value_and_grad(loss_fn, params, wrt=wrt)[1]


def jvp_with_primal(fn: LossFn, params: ParamSet, tangent: GradientBundle,
                    *, wrt: Sequence[str] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward-mode pass: returns (f(params), d/deps f(params + eps*tangent) at 0).

    Only the entries of `wrt` receive a tangent; the remaining parameters are
    treated as constants, so a sparse tangent costs proportionally less.
    """
    wrt_ids = params.ids() if wrt is None else list(wrt)
    values = {spec.layer_id: v.detach() for spec, v in params}
    for lid in wrt_ids:
        if lid not in tangent.values:
            raise SubstrateError(f"tangent missing layer {lid!r}")
        if tangent.values[lid].shape != values[lid].shape:
            raise SubstrateError(f"tangent shape mismatch at layer {lid!r}")
    primals = {lid: values[lid] for lid in wrt_ids}
    tangents = {lid: tangent.values[lid].detach().to(values[lid].dtype) for lid in wrt_ids}
    const = {lid: v for lid, v in values.items() if lid not in set(wrt_ids)}

    def wrapped(moving: dict[str, torch.Tensor]) -> torch.Tensor:
        merged = dict(const)
        merged.update(moving)
        return fn(merged)

    out, jv = torch.func.jvp(wrapped, (primals,), (tangents,))
    return out, jv


def jvp(fn: LossFn, params: ParamSet, tangent: GradientBundle,
        *, wrt: Sequence[str] | None = None) -> torch.Tensor:
    return jvp_with_primal(fn, params, tangent, wrt=wrt)[1]


def fd_directional(fn: LossFn, params: ParamSet, tangent: GradientBundle,
                   eps: float = 1e-5) -> torch.Tensor:
    """Central-difference derivative of fn along a parameter-space tangent."""
    def shifted(sign: float) -> torch.Tensor:
        vals = {
            spec.layer_id: (params.values[spec.layer_id].detach()
                            + sign * eps * tangent.values.get(spec.layer_id,
                                                              torch.zeros(spec.shape, dtype=params.dtype)))
            for spec, _ in params
        }
        return fn(vals)

    return (shifted(+1.0) - shifted(-1.0)) / (2.0 * eps)


def fd_gradient(fn: LossFn, params: ParamSet, *, wrt: Sequence[str] | None = None,
                eps: float = 1e-5) -> GradientBundle:
    """Per-coordinate central-difference gradient. Exhaustive; tiny nets only."""
    wrt_ids = params.ids() if wrt is None else list(wrt)
    base = {spec.layer_id: params.values[spec.layer_id].detach().clone() for spec, _ in params}
    out: dict[str, torch.Tensor] = {}
    for lid in wrt_ids:
        flat = base[lid].reshape(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(base)
            flat[i] = orig - eps
            lo = fn(base)
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        out[lid] = g.reshape(base[lid].shape)
    return GradientBundle(out)


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    scale = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / scale).max())


@dataclass
class GradCheckReport:
    op: str
    trials: int
    tol: float
    max_rel_reverse: float
    max_rel_forward: float
    passed: bool

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.op}: reverse {self.max_rel_reverse:.3e} "
                f"forward {self.max_rel_forward:.3e} tol {self.tol:.0e} [{status}]")


def check_gradients(op_name: str, trials: int = 5, tol: float = 1e-4, *,
                    dtype: str = "f64", seed: int = 0,
                    registry: Mapping[str, KernelCase] | None = None) -> GradCheckReport:
    """Randomized FD comparison of one registered kernel, both AD modes."""
    reg = kernel_registry() if registry is None else dict(registry)
    if op_name not in reg:
        raise SubstrateError(f"unknown op {op_name!r}; registered: {sorted(reg)}")
    case = reg[op_name]
    dt = torch.float64 if dtype == "f64" else torch.float32
    eps = 1e-5 if dt == torch.float64 else 1e-3
    rng = np.random.default_rng(seed)
    worst_rev, worst_fwd = 0.0, 0.0
    for _ in range(trials):
        inputs, kwargs = case.make_inputs(rng, dt)
        probe = torch.from_numpy(rng.uniform(-1, 1, size=tuple(case.fn(*inputs, **kwargs).shape))).to(dt)

        def scalar(*xs: torch.Tensor) -> torch.Tensor:
            return (case.fn(*xs, **kwargs) * probe).sum()

        # reverse mode vs per-coordinate central differences
        leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
        grads = torch.autograd.grad(scalar(*leaves), leaves, allow_unused=True)
        for k, x in enumerate(inputs):
            g_ad = grads[k] if grads[k] is not None else torch.zeros_like(x)
            flat = x.detach().clone().reshape(-1)
            g_fd = torch.zeros_like(flat)
            shaped = flat.reshape(x.shape)
            args = [shaped if j == k else inputs[j] for j in range(len(inputs))]
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = scalar(*args)
                flat[i] = orig - eps
                lo = scalar(*args)
                flat[i] = orig
                g_fd[i] = (hi - lo) / (2 * eps)
            worst_rev = max(worst_rev, max_rel_err(g_ad.reshape(-1), g_fd))

        # forward mode vs central differences along a random tangent
        tangents = tuple(torch.from_numpy(rng.uniform(-1, 1, size=tuple(x.shape))).to(dt) for x in inputs)
        _, jv = torch.func.jvp(lambda *xs: case.fn(*xs, **kwargs), tuple(x.detach() for x in inputs), tangents)
        hi = case.fn(*[x + eps * v for x, v in zip(inputs, tangents)], **kwargs)
        lo = case.fn(*[x - eps * v for x, v in zip(inputs, tangents)], **kwargs)
        fd = (hi - lo) / (2 * eps)
        worst_fwd = max(worst_fwd, max_rel_err(jv, fd, floor=1e-6))
    return GradCheckReport(op=op_name, trials=trials, tol=tol,
                           max_rel_reverse=worst_rev, max_rel_forward=worst_fwd,
                           passed=worst_rev <= tol and worst_fwd <= tol)


def check_all_kernels(trials: int = 3, tol: float = 1e-4, *, dtype: str = "f64",
                      seed: int = 0,
                      registry: Mapping[str, KernelCase] | None = None) -> list[GradCheckReport]:
    reg = kernel_registry() if registry is None else dict(registry)
    return [check_gradients(name, trials=trials, tol=tol, dtype=dtype, seed=seed, registry=reg)
            for name in sorted(reg)]
