"""Dataset export and reload.

Two flavors share one file layout: oracle sets straight from the world
(images + exact masks, optionally features) and annotator-labeled sets (the
trained-annotator-as-data-generator path, with soft labels stored exactly
and hard masks derived by argmax).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from ..models import AnnotatorArch, ParamSet, soft_labels, stack_pyramids
from ..world import LabeledSet, LatentStream, WorldConfig, sample_scene


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    count: int
    files: list[str]
    world_config_hash: str
    annotator_hash: str | None
    label_kind: str
    seed: int | None = None
    stream_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "files": self.files,
            "world_config_hash": self.world_config_hash,
            "annotator_hash": self.annotator_hash,
            "label_kind": self.label_kind,
            "seed": self.seed,
            "stream_id": self.stream_id,
        }


@dataclass
class AnnotatedDataset:
    """In-memory training-ready dataset: quantized images + soft labels."""

    images: np.ndarray       # (N, 3, H, W) float32 in [0,1], 8-bit quantized
    soft: np.ndarray         # (N, C, H, W) float32 distributions
    hard: np.ndarray         # (N, H, W) uint8 argmax masks

    def __len__(self) -> int:
        return self.images.shape[0]


def quantize_image(x: np.ndarray) -> np.ndarray:
    """To 8-bit and back: the canonical on-disk image representation."""
    u8 = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / 255.0


def _image_to_png(x: np.ndarray, path: Path) -> None:
    u8 = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(path)


def _png_to_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return np.moveaxis(arr, -1, 0).astype(np.float32) / 255.0


def _mask_to_png(y: np.ndarray, path: Path) -> None:
    if y.max() > 255:
        raise DatasetError("mask classes exceed 8-bit range")
    Image.fromarray(y.astype(np.uint8), mode="L").save(path)


def _png_to_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def _write_raw(arr: np.ndarray, path: Path) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(data.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "f32", "order": "C", "byte_order": "little"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def _read_raw(path: Path) -> np.ndarray:
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    return arr.reshape(sidecar["shape"]).copy()


def params_hash(params: ParamSet) -> str:
    digest = hashlib.sha256()
    for spec, value in params:
        digest.update(spec.layer_id.encode())
        digest.update(np.ascontiguousarray(value.detach().numpy()).astype("<f4").tobytes())
    return digest.hexdigest()[:16]


def label_with_annotator(world_cfg: WorldConfig, ann_arch: AnnotatorArch, params: ParamSet,
                         n: int, seed: int, *, batch: int = 8,
                         ) -> tuple[AnnotatedDataset, str]:
    """Generate n fresh scenes and label them with the annotator."""
    if n < 1:
        raise DatasetError("dataset size must be >= 1")
    stream = LatentStream("export", seed, world_cfg.latent_dim)
    cfg = replace(world_cfg, ood=False)
    samples = [sample_scene(z, cfg) for z in stream.draw(n)]
    images = np.stack([quantize_image(s.x) for s in samples])
    soft_list = []
    for i in range(0, n, batch):
        chunk = samples[i:i + batch]
        pyr = stack_pyramids([[torch.from_numpy(lv) for lv in s.h] for s in chunk])
        with torch.no_grad():
            soft_list.append(soft_labels(ann_arch.forward(params.values, pyr)).numpy())
    soft = np.concatenate(soft_list, axis=0).astype(np.float32)
    hard = soft.argmax(axis=1).astype(np.uint8)  # ties break to the lowest class index
    return AnnotatedDataset(images=images, soft=soft, hard=hard), stream.stream_id


def export_dataset(world_cfg: WorldConfig, ann_arch: AnnotatorArch, params: ParamSet,
                   n: int, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write an annotator-labeled dataset: image PNGs, exact soft labels,
    argmax hard-mask PNGs, and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, stream_id = label_with_annotator(world_cfg, ann_arch, params, n, seed)
    files: list[str] = []
    for i in range(n):
        img, soft_name, mask = f"image_{i:05d}.png", f"soft_{i:05d}.raw", f"mask_{i:05d}.png"
        _image_to_png(dataset.images[i], out / img)
        _write_raw(dataset.soft[i], out / soft_name)
        _mask_to_png(dataset.hard[i], out / mask)
        files += [img, soft_name, soft_name + ".json", mask]
    manifest = DatasetManifest(count=n, files=files,
                               world_config_hash=world_cfg.config_hash(),
                               annotator_hash=params_hash(params),
                               label_kind="soft+hard", seed=seed, stream_id=stream_id)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest


def load_dataset(path: str | Path) -> tuple[AnnotatedDataset, DatasetManifest]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    raw = json.loads(manifest_path.read_text())
    manifest = DatasetManifest(**raw)
    for name in manifest.files:
        if not (root / name).exists():
            raise DatasetError(f"{root}: manifest lists missing file {name!r}")
    n = manifest.count
    images, soft, hard = [], [], []
    for i in range(n):
        images.append(_png_to_image(root / f"image_{i:05d}.png"))
        soft.append(_read_raw(root / f"soft_{i:05d}.raw"))
        hard.append(_png_to_mask(root / f"mask_{i:05d}.png"))
    dataset = AnnotatedDataset(images=np.stack(images), soft=np.stack(soft).astype(np.float32),
                               hard=np.stack(hard))
    return dataset, manifest


def export_labeled_set(labeled: LabeledSet, world_cfg: WorldConfig,
                       out_dir: str | Path) -> DatasetManifest:
    """Oracle-set export: images, exact masks, and features when present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[str] = []
    for i, ex in enumerate(labeled.examples):
        img, mask = f"image_{i:05d}.png", f"mask_{i:05d}.png"
        _image_to_png(ex.x, out / img)
        _mask_to_png(ex.y, out / mask)
        files += [img, mask]
        if ex.h is not None:
            for lv, feat in zip(world_cfg.pyramid_levels, ex.h):
                name = f"feat_{i:05d}_l{lv}.raw"
                _write_raw(feat, out / name)
                files += [name, name + ".json"]
    manifest = DatasetManifest(count=len(labeled.examples), files=files,
                               world_config_hash=world_cfg.config_hash(),
                               annotator_hash=None,
                               label_kind=f"oracle-{labeled.mode}",
                               seed=labeled.seed, stream_id=labeled.stream_id)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1))
    return manifest
