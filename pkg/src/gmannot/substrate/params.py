"""Parameter containers shared by every model and training loop.

Layer metadata travels with the weights so that downstream code (gradient
matching, checkpointing, layer selection) never has to guess how a tensor
decomposes into per-node slices.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping

import numpy as np
import torch

LAYER_KINDS = ("conv", "dense", "bias", "norm-affine")

_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_NP_DTYPES = {"f32": "<f4", "f64": "<f8"}


class SubstrateError(ValueError):
    pass


class CheckpointError(SubstrateError):
    pass


def torch_dtype(name: str) -> torch.dtype:
    try:
        return _DTYPES[name]
    except KeyError:
        raise SubstrateError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")


def dtype_name(dtype: torch.dtype) -> str:
    for name, dt in _DTYPES.items():
        if dt == dtype:
            return name
    raise SubstrateError(f"unsupported dtype {dtype}")


@dataclass(frozen=True)
class LayerSpec:
    """Identity and node structure of one parameter tensor."""

    layer_id: str
    kind: str
    shape: tuple[int, ...]
    node_axis: int = 0
    matchable: bool = False
    group: str = ""

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise SubstrateError(f"layer {self.layer_id!r}: unknown kind {self.kind!r}")
        if self.shape and not (0 <= self.node_axis < len(self.shape)):
            raise SubstrateError(
                f"layer {self.layer_id!r}: node_axis {self.node_axis} invalid for shape {self.shape}"
            )


@dataclass
class ParamSet:
    """Ordered collection of named parameter tensors."""

    layers: list[LayerSpec]
    values: dict[str, torch.Tensor]

    def __post_init__(self) -> None:
        ids = [spec.layer_id for spec in self.layers]
        if len(ids) != len(set(ids)):
            raise SubstrateError("duplicate layer ids in ParamSet")
        if set(ids) != set(self.values):
            raise SubstrateError("ParamSet layers and values disagree")
        for spec in self.layers:
            got = tuple(self.values[spec.layer_id].shape)
            if got != spec.shape:
                raise SubstrateError(
                    f"layer {spec.layer_id!r}: tensor shape {got} != declared {spec.shape}"
                )

    def __iter__(self) -> Iterator[tuple[LayerSpec, torch.Tensor]]:
        for spec in self.layers:
            yield spec, self.values[spec.layer_id]

    def ids(self) -> list[str]:
        return [spec.layer_id for spec in self.layers]

    def spec(self, layer_id: str) -> LayerSpec:
        for s in self.layers:
            if s.layer_id == layer_id:
                return s
        raise KeyError(layer_id)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.values.values())).dtype

    def clone(self) -> "ParamSet":
        return ParamSet(list(self.layers), {k: v.clone() for k, v in self.values.items()})

    def detached(self) -> "ParamSet":
        return ParamSet(list(self.layers), {k: v.detach() for k, v in self.values.items()})

    def to_dtype(self, name: str) -> "ParamSet":
        dt = torch_dtype(name)
        return ParamSet(list(self.layers), {k: v.detach().to(dt) for k, v in self.values.items()})

    def map_values(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> "ParamSet":
        return ParamSet(list(self.layers), {k: fn(k, v) for k, v in self.values.items()})

    def matchable_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.matchable]

    def num_parameters(self) -> int:
        return sum(int(np.prod(s.shape)) for s in self.layers)


@dataclass
class GradientBundle:
    """Per-layer gradients aligned with a ParamSet ordering."""

    values: dict[str, torch.Tensor]

    def aligned_with(self, params: ParamSet) -> bool:
        if set(self.values) != set(params.values):
            return False
        return all(self.values[k].shape == params.values[k].shape for k in self.values)

    def check_aligned(self, params: ParamSet) -> None:
        if not self.aligned_with(params):
            raise SubstrateError("gradient bundle not aligned with parameter set")

    def add(self, other: "GradientBundle") -> "GradientBundle":
        if set(self.values) != set(other.values):
            raise SubstrateError("cannot add misaligned gradient bundles")
        return GradientBundle({k: self.values[k] + other.values[k] for k in self.values})

    def scale(self, alpha: float) -> "GradientBundle":
        return GradientBundle({k: v * alpha for k, v in self.values.items()})

    def dot(self, other: "GradientBundle") -> torch.Tensor:
        if set(self.values) != set(other.values):
            raise SubstrateError("cannot dot misaligned gradient bundles")
        keys = sorted(self.values)
        return sum((self.values[k] * other.values[k]).sum() for k in keys)

    def norm(self) -> torch.Tensor:
        return torch.sqrt(self.dot(self))

    def detached(self) -> "GradientBundle":
        return GradientBundle({k: v.detach() for k, v in self.values.items()})

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.values.values())

    @staticmethod
    def zeros_like(params: ParamSet) -> "GradientBundle":
        return GradientBundle({k: torch.zeros_like(v) for k, v in params.values.items()})


@dataclass
class OptState:
    """SGD-with-momentum state: one velocity buffer per parameter."""

    lr: float
    momentum: float
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)

    @staticmethod
    def fresh(params: ParamSet, lr: float = 0.001, momentum: float = 0.9) -> "OptState":
        return OptState(lr=lr, momentum=momentum,
                        buffers={k: torch.zeros_like(v) for k, v in params.values.items()})


def stable_hash(*parts: object) -> int:
    """Process-independent 63-bit hash of a tuple of printable parts."""
    blob = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


def named_seed(*parts: object) -> np.random.Generator:
    """Deterministic generator derived from a tuple of printable parts.

    Uses a content hash, never Python's salted hash(), so streams are
    identical across interpreter runs.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stable_hash(*parts))))


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
               dtype: str = "f32") -> torch.Tensor:
    """Fan-in-scaled uniform init for conv/dense weights."""
    bound = float(np.sqrt(6.0 / max(fan_in, 1)))
    arr = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return torch.from_numpy(arr).to(torch_dtype(dtype))


def init_layer(spec: LayerSpec, seed: int, dtype: str = "f32") -> torch.Tensor:
    """He-style init for weights, zeros for biases, keyed by (seed, layer_id)."""
    if spec.kind == "bias":
        return torch.zeros(spec.shape, dtype=torch_dtype(dtype))
    if spec.kind == "conv":
        fan_in = int(np.prod(spec.shape[1:]))
    elif spec.kind == "dense":
        fan_in = int(spec.shape[1]) if len(spec.shape) > 1 else int(spec.shape[0])
    else:
        fan_in = int(np.prod(spec.shape))
    rng = named_seed("init", seed, spec.layer_id)
    return he_uniform(spec.shape, fan_in, rng, dtype)


def init_params(layers: list[LayerSpec], seed: int, dtype: str = "f32") -> ParamSet:
    return ParamSet(list(layers), {s.layer_id: init_layer(s, seed, dtype) for s in layers})


# Checkpoint format: 8-byte magic, little-endian u32 header length, UTF-8 JSON
# header, then the raw little-endian tensor payload in header order.
_CKPT_MAGIC = b"GMANNOT1"


def save_checkpoint(params: ParamSet, path: str, meta: Mapping[str, object] | None = None) -> None:
    dtype = dtype_name(params.dtype)
    header = {
        "dtype": dtype,
        "layers": [
            {
                "layer_id": s.layer_id,
                "kind": s.kind,
                "shape": list(s.shape),
                "node_axis": s.node_axis,
                "matchable": s.matchable,
                "group": s.group,
            }
            for s in params.layers
        ],
        "meta": dict(meta or {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    np_dt = _NP_DTYPES[dtype]
    payload = b"".join(
        np.ascontiguousarray(params.values[s.layer_id].detach().numpy()).astype(np_dt, copy=False).tobytes()
        for s in params.layers
    )
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path: str) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", blob[8:12])
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    dtype = header["dtype"]
    np_dt = np.dtype(_NP_DTYPES[dtype])
    layers, values = [], {}
    offset = header_end
    for entry in header["layers"]:
        spec = LayerSpec(
            layer_id=entry["layer_id"],
            kind=entry["kind"],
            shape=tuple(entry["shape"]),
            node_axis=entry["node_axis"],
            matchable=entry["matchable"],
            group=entry["group"],
        )
        nbytes = int(np.prod(spec.shape)) * np_dt.itemsize
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload at layer {spec.layer_id!r}")
        arr = np.frombuffer(chunk, dtype=np_dt).reshape(spec.shape)
        values[spec.layer_id] = torch.from_numpy(arr.copy())
        layers.append(spec)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return ParamSet(layers, values), header.get("meta", {})
