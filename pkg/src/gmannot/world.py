"""Frozen procedural generator: latent -> (feature pyramid, image) with
oracle part masks for evaluation.

A latent vector deterministically parameterizes an articulated creature
(body ellipse, head disk, two eyes, four legs, a tail), a palette, and a
texture phase. Features are noisy linear mixtures of per-part presence
maps, so recovering labels from them requires learned unmixing rather than
a lookup. Everything here is a pure function of (z, config).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Literal

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .substrate.params import named_seed, stable_hash

PART_NAMES = ("background", "body", "head", "eye", "leg", "tail")
# label priority, topmost first: eye > head > tail > leg > body > background
PRIORITY = ("eye", "head", "tail", "leg", "body")
PART_CLASS = {"body": 1, "head": 2, "eye": 3, "leg": 4, "tail": 5}

Mode = Literal["real", "synthetic", "ood"]


class WorldError(ValueError):
    pass


class DegenerateSceneError(WorldError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 64
    num_classes: int = 6
    latent_dim: int = 64
    pyramid_levels: tuple[int, ...] = (8, 16, 32, 64)
    channels_per_level: int = 8
    nuisance_channels: int = 4
    mixing_seed: int = 7
    quality: float = 1.0
    ood: bool = False
    min_part_pixels: int = 4
    texture_amp: float = 0.14
    feature_noise: float = 0.03
    feature_gain_jitter: float = 0.35
    feature_texture_leak: float = 0.30
    max_redraws: int = 8

    def __post_init__(self) -> None:
        if self.num_classes < 2 or self.num_classes > len(PART_NAMES):
            raise WorldError(f"num_classes must be in [2, {len(PART_NAMES)}]")
        if not self.pyramid_levels or list(self.pyramid_levels) != sorted(set(self.pyramid_levels)):
            raise WorldError("pyramid_levels must be strictly increasing")
        if self.pyramid_levels[-1] != self.image_size:
            raise WorldError("last pyramid level must equal image_size")
        if not 0.0 <= self.quality <= 1.0:
            raise WorldError("quality must lie in [0, 1]")
        if self.latent_dim < 1:
            raise WorldError("latent_dim must be positive")
        for lv in self.pyramid_levels:
            scale = self.image_size // lv
            if lv * scale != self.image_size or scale & (scale - 1):
                raise WorldError("pyramid levels must divide image_size by powers of two")

    @property
    def feature_channels(self) -> int:
        return self.channels_per_level + self.nuisance_channels

    def class_names(self) -> tuple[str, ...]:
        return PART_NAMES[: self.num_classes]

    def cache_key(self) -> tuple:
        return (self.image_size, self.num_classes, self.latent_dim, self.pyramid_levels,
                self.channels_per_level, self.nuisance_channels, self.mixing_seed)

    def config_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GenSample:
    z: np.ndarray
    h: list[np.ndarray]
    x: np.ndarray
    y_star: np.ndarray


@dataclass
class LabeledExample:
    x: np.ndarray
    y: np.ndarray
    h: list[np.ndarray] | None = None


@dataclass
class LabeledSet:
    examples: list[LabeledExample]
    mode: Mode
    seed: int
    stream_id: str

    def __len__(self) -> int:
        return len(self.examples)


class LatentStream:
    """Deterministic latent source; distinct (domain, seed) pairs never collide."""

    def __init__(self, domain: str, seed: int, latent_dim: int):
        self.domain = domain
        self.seed = seed
        self.latent_dim = latent_dim
        self._rng = named_seed("latents", domain, seed)

    @property
    def stream_id(self) -> str:
        return f"{self.domain}:{self.seed}"

    def draw(self, n: int) -> np.ndarray:
        return self._rng.standard_normal((n, self.latent_dim))


def assert_disjoint_streams(streams: Iterable[LatentStream]) -> None:
    ids = [s.stream_id for s in streams]
    if len(ids) != len(set(ids)):
        raise WorldError(f"latent streams must be pairwise disjoint, got {ids}")


# ---------------------------------------------------------------------------
# fixed internals (independent of z)

_GEOM_DIMS = 34


def _internals(cfg: WorldConfig) -> dict:
    key = cfg.cache_key()
    cached = _internals_cache.get(key)
    if cached is not None:
        return cached
    rng = named_seed("world-internals", cfg.mixing_seed)
    proj = rng.standard_normal((_GEOM_DIMS, cfg.latent_dim))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    mixers = {
        lv: rng.standard_normal((cfg.channels_per_level, cfg.num_classes)) / math.sqrt(cfg.num_classes)
        for lv in cfg.pyramid_levels
    }
    out = {"proj": proj, "mixers": mixers}
    _internals_cache[key] = out
    return out


_internals_cache: dict[tuple, dict] = {}


@dataclass
class _Creature:
    center: np.ndarray
    body_ax: tuple[float, float]
    phi: float
    head_center: np.ndarray
    head_r: float
    eye_centers: list[np.ndarray]
    eye_r: float
    legs: list[tuple[np.ndarray, np.ndarray]]
    leg_w: float
    tail: tuple[np.ndarray, np.ndarray]
    tail_w: float
    hue: float
    sat: float
    val: float
    bg_hue: float
    bg_angle: float
    tex_freq: tuple[float, float]
    tex_phase: float


def _creature_from_latent(z: np.ndarray, cfg: WorldConfig, ood: bool) -> _Creature:
    u = _internals(cfg)["proj"] @ np.asarray(z, dtype=np.float64)
    t = np.tanh(u)
    s = cfg.image_size
    px = 1.0 / s

    cx, cy = 0.46 + 0.06 * t[0], 0.50 + 0.05 * t[1]
    a, b = 0.26 + 0.04 * t[2], 0.17 + 0.03 * t[3]
    phi = 0.30 * t[4]
    head_r = 0.095 + 0.015 * t[5]
    psi = phi + 0.25 * t[6]
    direction = np.array([math.cos(psi), math.sin(psi)])
    center = np.array([cx, cy])
    head_center = center + (a + 0.55 * head_r) * direction

    # pixel floor keeps eyes resolvable at small sizes; the cap keeps them
    # from occluding the whole head there
    eye_r = min(max(0.030 + 0.006 * t[7], 1.75 * px), 0.55 * head_r)
    eye_fwd = (0.15 + 0.10 * t[8]) * head_r
    eye_sep = (0.42 + 0.08 * t[21]) * head_r
    ortho = np.array([-direction[1], direction[0]])
    eye_centers = [head_center + eye_fwd * direction + sgn * eye_sep * ortho for sgn in (-1.0, 1.0)]

    axis = np.array([math.cos(phi), math.sin(phi)])
    down = np.array([-math.sin(phi), math.cos(phi)])
    thick_mul = 1.3 if ood else 1.0
    leg_w = max((0.026 + 0.005 * t[17]), 1.1 * px) * thick_mul
    legs = []
    for i, frac in enumerate((-0.6, -0.2, 0.2, 0.6)):
        start = center + frac * a * axis + 0.80 * b * down
        alpha = math.pi / 2 + 0.25 * t[9 + i]
        length = 0.16 + 0.04 * t[13 + i]
        end = start + length * np.array([math.cos(alpha), math.sin(alpha)])
        legs.append((start, end))

    tail_w = max((0.024 + 0.005 * t[20]), 1.1 * px) * thick_mul
    beta = phi + math.pi - 0.45 + 0.35 * t[18]
    tail_start = center - 0.98 * a * axis
    tail_len = 0.17 + 0.05 * t[19]
    tail_end = tail_start + tail_len * np.array([math.cos(beta), math.sin(beta)])

    hue = (t[24] + 1.0) / 2.0
    if ood:
        hue = (hue + 0.35) % 1.0
    return _Creature(
        center=center, body_ax=(a, b), phi=phi,
        head_center=head_center, head_r=head_r,
        eye_centers=eye_centers, eye_r=eye_r,
        legs=legs, leg_w=leg_w, tail=(tail_start, tail_end), tail_w=tail_w,
        hue=hue, sat=0.45 + 0.15 * t[25], val=0.55 + 0.12 * t[26],
        bg_hue=((t[27] + 1.0) / 2.0 + (0.5 if ood else 0.0)) % 1.0,
        bg_angle=math.pi * t[28],
        tex_freq=(4.0 + 2.0 * t[30], 4.0 + 2.0 * t[31]),
        tex_phase=math.pi * t[32],
    )


@lru_cache(maxsize=8)
def _grid(s: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(s, dtype=np.float64) + 0.5) / s
    gx, gy = np.meshgrid(coords, coords, indexing="xy")
    gx.setflags(write=False)
    gy.setflags(write=False)
    return gx, gy


def _part_fields(c: _Creature, s: int) -> dict[str, np.ndarray]:
    """Signed inside-distance per part, in normalized units, on the pixel grid."""
    gx, gy = _grid(s)
    a, b = c.body_ax
    dx, dy = gx - c.center[0], gy - c.center[1]
    cphi, sphi = math.cos(c.phi), math.sin(c.phi)
    xr = (dx * cphi + dy * sphi) / a
    yr = (-dx * sphi + dy * cphi) / b
    q = np.sqrt(xr * xr + yr * yr)
    body = (1.0 - q) * b

    def disk(center: np.ndarray, r: float) -> np.ndarray:
        return r - np.hypot(gx - center[0], gy - center[1])

    def capsule(seg: tuple[np.ndarray, np.ndarray], w: float) -> np.ndarray:
        p0, p1 = seg
        vx, vy = p1[0] - p0[0], p1[1] - p0[1]
        vv = vx * vx + vy * vy
        tt = np.clip(((gx - p0[0]) * vx + (gy - p0[1]) * vy) / max(vv, 1e-12), 0.0, 1.0)
        return w - np.hypot(gx - (p0[0] + tt * vx), gy - (p0[1] + tt * vy))

    head = disk(c.head_center, c.head_r)
    eye = np.maximum(disk(c.eye_centers[0], c.eye_r), disk(c.eye_centers[1], c.eye_r))
    leg = np.maximum.reduce([capsule(seg, c.leg_w) for seg in c.legs])
    tail = capsule(c.tail, c.tail_w)
    return {"body": body, "head": head, "eye": eye, "leg": leg, "tail": tail}


def _soft(field: np.ndarray, s: int) -> np.ndarray:
    # ~1px antialiasing band
    return expit(2.2 * s * field)


def _fold_class(part: str, num_classes: int) -> int:
    cls = PART_CLASS[part]
    return cls if cls < num_classes else 1


def _oracle_mask(fields: dict[str, np.ndarray], cfg: WorldConfig) -> np.ndarray:
    y = np.zeros(fields["body"].shape, dtype=np.int64)
    for part in reversed(PRIORITY):  # paint bottom-up so top priority wins
        y[fields[part] > 0.0] = _fold_class(part, cfg.num_classes)
    return y


def _visible_presence(fields: dict[str, np.ndarray], cfg: WorldConfig, s: int) -> np.ndarray:
    """Occlusion-aware soft presence per class channel, channel 0 = background."""
    presence = np.zeros((cfg.num_classes,) + fields["body"].shape, dtype=np.float64)
    remaining = np.ones_like(fields["body"])
    for part in PRIORITY:  # top-down alpha compositing
        p = _soft(fields[part], s)
        visible = p * remaining
        presence[_fold_class(part, cfg.num_classes)] += visible
        remaining = remaining * (1.0 - p)
    presence[0] = remaining
    return presence


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


_PART_STYLE = {  # hue shift, sat scale, val shift relative to the body color
    "body": (0.00, 1.00, 0.00),
    "head": (0.07, 0.95, 0.12),
    "eye": (0.00, 0.25, -0.45),
    "leg": (-0.06, 1.05, -0.12),
    "tail": (0.13, 1.00, -0.05),
}


def _render_image(c: _Creature, fields: dict[str, np.ndarray], cfg: WorldConfig,
                  ood: bool) -> np.ndarray:
    s = cfg.image_size
    gx, gy = _grid(s)
    proj = (gx - 0.5) * math.cos(c.bg_angle) + (gy - 0.5) * math.sin(c.bg_angle)
    grad = 0.5 if ood else np.clip(proj + 0.5, 0.0, 1.0)
    bg_rgb = _hsv_to_rgb(c.bg_hue, 0.30, 0.70)
    img = np.empty((3, s, s), dtype=np.float64)
    for ch in range(3):
        img[ch] = bg_rgb[ch] * (0.80 + 0.32 * grad)

    tex = np.sin(2 * math.pi * (c.tex_freq[0] * gx + c.tex_freq[1] * gy) + c.tex_phase)
    if not ood:
        img += (cfg.texture_amp * 0.6) * tex[None, :, :]
    for part in reversed(PRIORITY):  # paint bottom-up, topmost part last
        dh, ssc, dv = _PART_STYLE[part]
        rgb = _hsv_to_rgb((c.hue + dh) % 1.0, min(1.0, c.sat * ssc),
                          float(np.clip(c.val + dv, 0.05, 1.0)))
        alpha = _soft(fields[part], s)
        shade = 1.0 if ood else (0.80 + 0.40 * np.clip(fields[part] * s * 0.25 + 0.5, 0.0, 1.0))
        for ch in range(3):
            img[ch] = img[ch] * (1.0 - alpha) + rgb[ch] * shade * alpha
    if not ood and cfg.texture_amp > 0:
        creature = _soft(np.maximum.reduce([fields[p] for p in PRIORITY]), s)
        img += cfg.texture_amp * tex * creature
    return np.clip(img, 0.0, 1.0)


def _degrade(img: np.ndarray, z: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    if cfg.quality >= 1.0:
        return img
    out = img.astype(np.float64)
    sigma = (1.0 - cfg.quality) * 2.0
    if sigma > 0:
        out = gaussian_filter(out, sigma=(0.0, sigma, sigma), mode="nearest")
    amp = (1.0 - cfg.quality) * 0.15
    if amp > 0:
        rng = _z_rng(z, cfg, "degrade")
        coarse = rng.standard_normal((8, 8))
        reps = cfg.image_size // 8
        noise = np.kron(coarse, np.ones((reps, reps)))
        out = out + amp * noise[None, :, :]
    return np.clip(out, 0.0, 1.0)


def _z_rng(z: np.ndarray, cfg: WorldConfig, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(np.asarray(z, dtype=np.float64).tobytes()).digest()[:8]
    return named_seed(tag, cfg.mixing_seed, int.from_bytes(digest, "little"))


def _downsample(arr: np.ndarray, target: int) -> np.ndarray:
    # area-averaging by power-of-two reshaping; arr is (C, S, S)
    c, s, _ = arr.shape
    while s > target:
        arr = arr.reshape(c, s // 2, 2, s // 2, 2).mean(axis=(2, 4))
        s //= 2
    return arr


def _feature_pyramid(c: _Creature, presence: np.ndarray, z: np.ndarray,
                     cfg: WorldConfig) -> list[np.ndarray]:
    mixers = _internals(cfg)["mixers"]
    s = cfg.image_size
    gx, gy = _grid(s)
    tex = np.sin(2 * math.pi * (c.tex_freq[0] * gx + c.tex_freq[1] * gy) + c.tex_phase)
    rr = np.hypot(gx - 0.5, gy - 0.5) * 2.0
    nuisance_full = [tex, gx * 2.0 - 1.0, gy * 2.0 - 1.0, rr]
    k = 3
    while len(nuisance_full) < cfg.nuisance_channels:
        nuisance_full.append(np.sin(2 * math.pi * k * (gx if len(nuisance_full) % 2 == 0 else gy)))
        k += 2
    nuisance_full = np.stack(nuisance_full[: cfg.nuisance_channels]) if cfg.nuisance_channels else None

    # light pre-blur so even the finest level is smoothed, not a mask copy
    blurred = gaussian_filter(presence, sigma=(0.0, 0.7, 0.7), mode="nearest")
    rng = _z_rng(z, cfg, "featnoise")
    # appearance entanglement: per-scene channel gains and texture leakage,
    # so the feature->label map drifts scene to scene instead of being a
    # fixed noiseless mixture
    gains = 1.0 + cfg.feature_gain_jitter * np.tanh(rng.standard_normal(cfg.num_classes))
    creature_soft = 1.0 - blurred[0]
    pyramid = []
    for lv in cfg.pyramid_levels:
        pres_lv = _downsample(blurred, lv) * gains[:, None, None]
        mixed = np.einsum("kc,chw->khw", mixers[lv], pres_lv)
        if cfg.feature_texture_leak > 0:
            leak = _downsample((tex * creature_soft)[None], lv)[0]
            mixed = mixed + cfg.feature_texture_leak * leak[None, :, :]
        parts = [mixed]
        if nuisance_full is not None:
            parts.append(_downsample(nuisance_full, lv))
        feat = np.concatenate(parts, axis=0)
        if cfg.feature_noise > 0:
            feat = feat + cfg.feature_noise * rng.standard_normal(feat.shape)
        pyramid.append(feat.astype(np.float32))
    return pyramid


def _part_pixel_counts(y: np.ndarray, cfg: WorldConfig) -> dict[int, int]:
    expected = sorted({_fold_class(p, cfg.num_classes) for p in PRIORITY})
    return {cls: int((y == cls).sum()) for cls in expected}


def sample_scene(z: np.ndarray, config: WorldConfig) -> GenSample:
    """Deterministically expand one latent into (features, image, oracle mask).

    Degenerate creatures (any part under min_part_pixels) redraw a fresh
    latent from a hash of z, a bounded number of times.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (config.latent_dim,):
        raise WorldError(f"latent must have shape ({config.latent_dim},), got {z.shape}")
    current = z
    for _ in range(config.max_redraws + 1):
        creature = _creature_from_latent(current, config, ood=config.ood)
        fields = _part_fields(creature, config.image_size)
        y = _oracle_mask(fields, config)
        counts = _part_pixel_counts(y, config)
        if all(n >= config.min_part_pixels for n in counts.values()):
            img = _render_image(creature, fields, config, ood=config.ood)
            if not config.ood:
                img = _degrade(img, current, config)
            presence = _visible_presence(fields, config, config.image_size)
            h = _feature_pyramid(creature, presence, current, config)
            return GenSample(z=z, h=h, x=img.astype(np.float32), y_star=y)
        current = _z_rng(current, config, "redraw").standard_normal(config.latent_dim)
    raise DegenerateSceneError(
        f"no valid scene after {config.max_redraws} redraws (min_part_pixels={config.min_part_pixels})")


def make_labeled_set(config: WorldConfig, n: int, mode: Mode, seed: int) -> LabeledSet:
    """Build the manually-labeled stand-in set in one of three provenance modes."""
    if n < 1:
        raise WorldError("labeled set size must be >= 1")
    if mode not in ("real", "synthetic", "ood"):
        raise WorldError(f"unknown labeled mode {mode!r}")
    stream = LatentStream(f"labeled-{mode}", seed, config.latent_dim)
    if mode == "real":
        sample_cfg = replace(config, quality=1.0, ood=False)
    elif mode == "ood":
        sample_cfg = replace(config, ood=True)
    else:
        sample_cfg = replace(config, ood=False)
    examples = []
    for z in stream.draw(n):
        s = sample_scene(z, sample_cfg)
        examples.append(LabeledExample(x=s.x, y=s.y_star, h=s.h if mode == "synthetic" else None))
    return LabeledSet(examples=examples, mode=mode, seed=seed, stream_id=stream.stream_id)


def describe_world(config: WorldConfig) -> dict:
    """Metadata record: class names, pyramid shapes, channel semantics."""
    mixed = [f"mixed part-presence {i}" for i in range(config.channels_per_level)]
    nuisance_names = ["texture field", "x coordinate", "y coordinate", "radial distance"]
    k = 3
    while len(nuisance_names) < config.nuisance_channels:
        axis = "x" if len(nuisance_names) % 2 == 0 else "y"
        nuisance_names.append(f"sin({k}*2pi*{axis})")
        k += 2
    return {
        "class_names": list(config.class_names()),
        "num_classes": config.num_classes,
        "image_size": config.image_size,
        "label_priority": list(PRIORITY) + ["background"],
        "pyramid_shapes": [[config.feature_channels, lv, lv] for lv in config.pyramid_levels],
        "channel_semantics": mixed + nuisance_names[: config.nuisance_channels],
        "latent_dim": config.latent_dim,
        "quality": config.quality,
        "ood": config.ood,
        "config_hash": config.config_hash(),
    }
