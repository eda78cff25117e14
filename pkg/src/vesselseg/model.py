"""Compact 3-D encoder-decoder with an optional BiM -> GeoAttn bottleneck."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import ops
from .geo_attn import GeoAttnParams, geo_attn_forward, geo_tensors, init_geo_attn_params
from .ssm import BiMParams, bim_forward, bim_tensors, init_bim_params
from .tensor import ShapeError, Tensor, no_grad


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 16
    levels: int = 3
    use_bim: bool = True
    use_geoattn: bool = True
    deep_supervision: bool = True
    ssm_state: int = 8
    ssm_expand: int = 2
    mlp_ratio: int = 2
    conv_width: int = 3
    bim_shared: bool = True
    bim_bare_scan: bool = False

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** l for l in range(self.levels)]

    @property
    def bottleneck_channels(self) -> int:
        return self.widths()[-1]

    def validate(self) -> None:
        problems = []
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.levels < 1:
            problems.append(f"levels must be >= 1 (got {self.levels})")
        if self.base_width < 1 or self.in_channels < 1:
            problems.append("base_width and in_channels must be positive")
        if self.use_geoattn and self.bottleneck_channels % 4:
            problems.append(f"bottleneck channels {self.bottleneck_channels} not divisible by 4 (use_geoattn)")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)).lower() if isinstance(getattr(self, f.name), bool)
                else str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                default = getattr(cls, f.name)
                kw[f.name] = _parse_bool(d[f.name]) if isinstance(default, bool) else int(d[f.name])
        return cls(**kw)

    @property
    def variant(self) -> str:
        name = "B"
        if self.use_bim:
            name += "+BiM"
        if self.use_geoattn:
            name += "+GeoAttn"
        return name


@dataclass
class SegModel:
    config: ModelConfig
    params: dict[str, Tensor]
    bim: BiMParams | None = None
    geo: GeoAttnParams | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def _uniform(rng: np.random.Generator, shape, dtype=np.float32) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def backbone_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of the encoder, decoder and heads (no bottleneck modules)."""
    w = config.widths()
    L = config.levels
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(L):
        if l > 0:
            shapes[f"down{l - 1}.weight"] = (w[l], w[l - 1], 2, 2, 2)
        cin = config.in_channels if l == 0 else w[l]
        shapes[f"enc{l}.conv0.weight"] = (w[l], cin, 3, 3, 3)
        shapes[f"enc{l}.conv1.weight"] = (w[l], w[l], 3, 3, 3)
    for l in reversed(range(L - 1)):
        shapes[f"up{l}.weight"] = (w[l], w[l + 1], 1, 1, 1)
        shapes[f"dec{l}.conv0.weight"] = (w[l], 2 * w[l], 3, 3, 3)
        shapes[f"dec{l}.conv1.weight"] = (w[l], w[l], 3, 3, 3)
    head_levels = range(L) if config.deep_supervision else range(1)
    for l in head_levels:
        shapes[f"head{l}.weight"] = (config.num_classes, w[l], 1, 1, 1)
        shapes[f"head{l}.bias"] = (config.num_classes,)
    return shapes


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SegModel:
    """Deterministic initialisation; each component draws from its own stream so
    toggling the bottleneck modules leaves backbone weights unchanged."""
    config.validate()
    rng = np.random.default_rng([seed, 0])
    params: dict[str, Tensor] = {}
    for name, shape in backbone_shapes(config).items():
        params[name] = _uniform(rng, shape, dtype)
    bim = geo = None
    C = config.bottleneck_channels
    if config.use_bim:
        bim = init_bim_params(C, state_size=config.ssm_state, expand=config.ssm_expand,
                              mlp_ratio=config.mlp_ratio, conv_width=config.conv_width,
                              rng=np.random.default_rng([seed, 1]), dtype=dtype,
                              shared=config.bim_shared, bare_scan=config.bim_bare_scan)
        params.update(bim_tensors(bim))
    if config.use_geoattn:
        geo = init_geo_attn_params(C, rng=np.random.default_rng([seed, 2]), dtype=dtype)
        params.update(geo_tensors(geo))
    for name, t in params.items():
        t.name = name
    return SegModel(config, params, bim, geo)


def _conv_block(h: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    for k in ("conv0", "conv1"):
        h = ops.relu(ops.instance_norm(ops.conv3d(h, p[f"{prefix}.{k}.weight"])))
    return h


def bottleneck(model: SegModel, h: Tensor) -> Tensor:
    if model.bim is not None:
        h = bim_forward(h, model.bim)          # residual inside the block
    if model.geo is not None:
        h = ops.add(h, geo_attn_forward(h, model.geo))
    return h


def check_input(config: ModelConfig, shape: Sequence[int]) -> None:
    if len(shape) != 5:
        raise ShapeError(f"input must be [B,C,D,H,W], got {tuple(shape)}", dim="rank")
    if shape[1] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {shape[1]}", dim="C")
    div = 2 ** (config.levels - 1)
    for name, s in zip("DHW", shape[2:]):
        if s % div:
            raise ShapeError(f"spatial extent {name}={s} not divisible by {div}", dim=name)


def forward(model: SegModel, x: Tensor) -> list[Tensor]:
    """Logits per head: full resolution first, then coarser levels when deep supervision is on."""
    cfg = model.config
    check_input(cfg, x.shape)
    p = model.params
    L = cfg.levels
    skips = []
    h = x
    for l in range(L):
        if l > 0:
            h = ops.down_conv(h, p[f"down{l - 1}.weight"])
        h = _conv_block(h, p, f"enc{l}")
        if l < L - 1:
            skips.append(h)
    h = bottleneck(model, h)
    level_out = {L - 1: h}
    for l in reversed(range(L - 1)):
        up = ops.conv3d(ops.upsample_nearest(h), p[f"up{l}.weight"])
        h = _conv_block(ops.concat([skips[l], up], axis=1), p, f"dec{l}")
        level_out[l] = h
    heads = range(L) if cfg.deep_supervision else range(1)
    return [ops.conv3d(level_out[l], p[f"head{l}.weight"], p[f"head{l}.bias"]) for l in heads]


# ---------------------------------------------------------------------------
# sliding-window inference
# ---------------------------------------------------------------------------


def tile_starts(size: int, patch: int, overlap: float) -> list[int]:
    if size <= patch:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def predict_probabilities(model: SegModel, volume: np.ndarray | Tensor, patch_shape: Sequence[int],
                          overlap: float = 0.5, batch: int = 2) -> np.ndarray:
    """Mean softmax over all tiles covering each voxel, ``[K, D, H, W]``."""
    if not 0.0 <= overlap <= 0.9:
        raise ValueError(f"overlap must lie in [0, 0.9], got {overlap}")
    vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    vol = vol.reshape(vol.shape[-3:]).astype(model.params[next(iter(model.params))].dtype)
    orig = vol.shape
    patch = tuple(int(s) for s in patch_shape)
    padded = tuple(max(s, p) for s, p in zip(orig, patch))
    if padded != orig:
        vol = np.pad(vol, [(0, P - s) for P, s in zip(padded, orig)])
    K = model.config.num_classes
    acc = np.zeros((K,) + padded, dtype=np.float64)
    count = np.zeros(padded, dtype=np.float64)
    origins = [(z, y, x)
               for z in tile_starts(padded[0], patch[0], overlap)
               for y in tile_starts(padded[1], patch[1], overlap)
               for x in tile_starts(padded[2], patch[2], overlap)]
    with no_grad():
        for i in range(0, len(origins), batch):
            chunk = origins[i:i + batch]
            tiles = np.stack([vol[z:z + patch[0], y:y + patch[1], x:x + patch[2]] for z, y, x in chunk])
            probs = ops.softmax(forward(model, Tensor(tiles[:, None], dtype=vol.dtype))[0], axis=1).data
            for (z, y, x), pr in zip(chunk, probs):
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                acc[(slice(None),) + sl] += pr
                count[sl] += 1
    probs = acc / count
    return probs[:, : orig[0], : orig[1], : orig[2]]


def predict_volume(model: SegModel, volume: np.ndarray | Tensor, patch_shape: Sequence[int],
                   overlap: float = 0.5) -> np.ndarray:
    """Label mask ``[D, H, W]``; argmax ties resolve to the lower class index."""
    probs = predict_probabilities(model, volume, patch_shape, overlap)
    return probs.argmax(axis=0).astype(np.uint8)
