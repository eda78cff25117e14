"""Synthetic dual-lumen tube phantoms.

A curved tube follows a cubic Bezier centerline through the depth axis. In the
dual-lumen case a thin membrane through the centerline (normal rotating slowly
with depth) splits the lumen in two. All randomness comes from a counter-based
SplitMix64 mixer keyed by (seed, stream, counter), so every voxel's noise is a
pure function of its flat index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from math import comb

import numpy as np
from scipy import ndimage

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAM_GEOMETRY = 1
STREAM_NOISE = 2
RETRY_OFFSET = 1_000_003
MAX_RETRIES = 8
FG_FRACTION_RANGE = (0.005, 0.30)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser applied to ``x + golden`` (uint64, wrapping)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        return splitmix64(k ^ np.uint64(stream))[0]


def counter_uniform(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) doubles, one per counter, keyed by (seed, stream)."""
    with np.errstate(over="ignore"):
        z = splitmix64(np.asarray(counters, dtype=np.uint64) * _GOLDEN + _key(seed, stream))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def counter_normal(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Standard normals via Box-Muller on counters (2c, 2c+1)."""
    c = np.asarray(counters, dtype=np.uint64)
    u1 = 1.0 - counter_uniform(seed, stream, 2 * c)
    u2 = counter_uniform(seed, stream, 2 * c + 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    r_min: float = 4.0
    r_max: float = 9.0
    control_points: int = 4
    dual_lumen: bool = True
    membrane_thickness: float = 1.0
    fg_mean: float = 0.55
    bg_mean: float = 0.45
    membrane_mean: float = 0.48
    noise_sigma: float = 0.05
    depth_blur: bool = False
    straight: bool = False      # collinear axial centerline (testing)

    def __post_init__(self):
        D, H, W = self.shape
        if min(self.shape) < 1:
            raise ValueError("extents must be positive")
        if not 0 < self.r_min <= self.r_max < min(H, W) / 4:
            raise ValueError(f"need 0 < r_min <= r_max < min(H, W)/4, got {self.r_min}, {self.r_max}")
        for v in (self.fg_mean, self.bg_mean, self.membrane_mean):
            if not 0.0 <= v <= 1.0:
                raise ValueError("intensities must lie in [0, 1]")
        if not self.bg_mean < self.membrane_mean < self.fg_mean:
            raise ValueError("need background < membrane < foreground means")
        if self.control_points < 2:
            raise ValueError("need at least 2 control points")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = "x".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "PhantomSpec":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = str(d[f.name]).strip()
            default = getattr(cls, f.name)
            if isinstance(default, tuple):
                kind = int if f.name == "shape" else float
                kw[f.name] = tuple(kind(x) for x in raw.replace(",", "x").split("x"))
            elif isinstance(default, bool):
                kw[f.name] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


@dataclass
class VolumeSample:
    image: np.ndarray          # [D, H, W] float32 in [0, 1]
    mask: np.ndarray           # [D, H, W] uint8 in {0, 1}
    spacing: tuple[float, float, float]
    case_id: str
    meta: dict = field(default_factory=dict)

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())


def bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate a Bezier curve with control points ``[n, dim]`` at parameters ``t``."""
    n = len(ctrl) - 1
    basis = np.stack([comb(n, i) * t ** i * (1 - t) ** (n - i) for i in range(n + 1)], axis=-1)
    return basis @ ctrl


def _geometry(spec: PhantomSpec, seed: int):
    D, H, W = spec.shape
    u = counter_uniform(seed, STREAM_GEOMETRY, np.arange(64))
    margin = spec.r_max + 2.0
    n = spec.control_points
    if spec.straight:
        yx = np.tile([(H - 1) / 2.0, (W - 1) / 2.0], (n, 1))
    else:
        ys = margin + u[0:n] * max(H - 1 - 2 * margin, 0.0)
        xs = margin + u[n:2 * n] * max(W - 1 - 2 * margin, 0.0)
        yx = np.stack([ys, xs], axis=1)
    t = np.arange(D) / max(D - 1, 1)
    centers = bezier(yx, t)
    r0 = spec.r_min + u[20] * (spec.r_max - spec.r_min)
    r1 = spec.r_min + u[21] * (spec.r_max - spec.r_min)
    radius = r0 + (r1 - r0) * t
    theta0 = u[22] * np.pi
    omega = (u[23] - 0.5) * 2.0 * np.pi / max(D, 1)
    theta = theta0 + omega * np.arange(D)
    return centers, radius, theta


def _rasterise(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Region labels: 0 background, 1 lumen, 2 membrane; plus the lumen side labels."""
    D, H, W = spec.shape
    centers, radius, theta = _geometry(spec, seed)
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    region = np.zeros(spec.shape, dtype=np.uint8)
    side = np.zeros(spec.shape, dtype=np.int8)
    for d in range(D):
        dy = yy - centers[d, 0]
        dx = xx - centers[d, 1]
        disk = dy * dy + dx * dx <= radius[d] ** 2
        region[d][disk] = 1
        if spec.dual_lumen:
            s = dy * np.cos(theta[d]) + dx * np.sin(theta[d])
            # half-width scaled by |n_y| + |n_x| gives a 4-connected digital plane
            half = 0.5 * spec.membrane_thickness * (abs(np.cos(theta[d])) + abs(np.sin(theta[d])))
            membrane = disk & (np.abs(s) < half)
            region[d][membrane] = 2
            side[d][disk & ~membrane & (s > 0)] = 1
            side[d][disk & ~membrane & (s < 0)] = -1
    if spec.dual_lumen:
        # any lumen voxel 26-adjacent to the opposite lumen becomes membrane
        pos = side == 1
        neg_near = ndimage.binary_dilation(side == -1, structure=np.ones((3, 3, 3), bool))
        clash = pos & neg_near
        region[clash] = 2
        side[clash] = 0
    return region, side


def gen_phantom(spec: PhantomSpec, seed: int, case_id: str | None = None) -> VolumeSample:
    """Deterministic phantom for ``(spec, seed)``; retries on out-of-range foreground fraction."""
    lo, hi = FG_FRACTION_RANGE
    for attempt in range(MAX_RETRIES + 1):
        s = seed + attempt * RETRY_OFFSET
        region, _ = _rasterise(spec, s)
        frac = float((region == 1).mean())
        if lo <= frac <= hi:
            break
    else:
        raise PhantomError(f"foreground fraction {frac:.4f} outside [{lo}, {hi}] after {MAX_RETRIES} retries")

    means = np.array([spec.bg_mean, spec.fg_mean, spec.membrane_mean])
    image = means[region]
    if spec.noise_sigma > 0:
        idx = np.arange(region.size, dtype=np.uint64)
        image = image + spec.noise_sigma * counter_normal(s, STREAM_NOISE, idx).reshape(region.shape)
    if spec.depth_blur and region.shape[0] > 1:
        padded = np.concatenate([image[:1], image, image[-1:]], axis=0)
        image = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = (region == 1).astype(np.uint8)
    return VolumeSample(image, mask, tuple(float(v) for v in spec.spacing),
                        case_id or f"seed{seed}", meta={"seed": s, "attempts": attempt})


SPLIT_STRIDE = 1_000_000


def gen_dataset(spec: PhantomSpec, n_train: int, n_val: int, n_test: int,
                base_seed: int = 0) -> tuple[list[VolumeSample], list[VolumeSample], list[VolumeSample]]:
    """Three splits drawn from disjoint seed ranges (train, val, test)."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("every split needs at least one case")
    out = []
    for k, (name, n) in enumerate((("train", n_train), ("val", n_val), ("test", n_test))):
        start = base_seed + k * SPLIT_STRIDE
        out.append([gen_phantom(spec, start + i, case_id=f"{name}_{i:03d}") for i in range(n)])
    return out[0], out[1], out[2]


def with_overrides(spec: PhantomSpec, **kw) -> PhantomSpec:
    return replace(spec, **kw)
