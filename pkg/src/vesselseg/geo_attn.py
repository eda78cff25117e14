"""Geometry-aware vessel attention.

Three plane-aligned anisotropic convolutions plus a full 3x3x3 branch are
fused, turned into a single-channel spatial map that gates the input
residually, and followed by dual-pooled channel attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor

BRANCHES = (("xy", (1, 3, 3)), ("yz", (3, 1, 3)), ("xz", (3, 3, 1)), ("3d", (3, 3, 3)))


class ConfigError(ValueError):
    pass


@dataclass
class GeoAttnParams:
    branch_w: dict[str, Tensor]
    branch_b: dict[str, Tensor]
    fuse_w: Tensor          # [C, 4*C_b, 1, 1, 1]
    fuse_b: Tensor
    sp_reduce_w: Tensor     # [C_r, C, 1, 1, 1]
    sp_reduce_b: Tensor
    sp_expand_w: Tensor     # [1, C_r, 1, 1, 1]
    sp_expand_b: Tensor
    gamma: Tensor           # 0-d
    ch_w1: Tensor           # [C/rho, C]
    ch_w2: Tensor           # [C, C/rho]

    @property
    def channels(self) -> int:
        return self.fuse_w.shape[0]


def _u(rng, shape, fan_in, dtype) -> Tensor:
    b = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True, dtype=dtype)


def init_geo_attn_params(channels: int, rng: np.random.Generator | None = None, dtype=np.float32,
                         reduction: int = 8, gamma: float = 0.0) -> GeoAttnParams:
    if channels % 4:
        raise ConfigError(f"GeoAttn channels must be divisible by 4, got {channels}")
    rng = rng if rng is not None else np.random.default_rng(0)
    C = channels
    cb = C // 4
    cr = max(C // 8, 4)
    ch_hidden = max(C // reduction, 1)
    bw, bb = {}, {}
    for name, k in BRANCHES:
        fan = C * int(np.prod(k))
        bw[name] = _u(rng, (cb, C) + k, fan, dtype)
        bb[name] = _u(rng, (cb,), fan, dtype)
    return GeoAttnParams(
        branch_w=bw, branch_b=bb,
        fuse_w=_u(rng, (C, 4 * cb, 1, 1, 1), 4 * cb, dtype),
        fuse_b=_u(rng, (C,), 4 * cb, dtype),
        sp_reduce_w=_u(rng, (cr, C, 1, 1, 1), C, dtype),
        sp_reduce_b=_u(rng, (cr,), C, dtype),
        sp_expand_w=_u(rng, (1, cr, 1, 1, 1), cr, dtype),
        sp_expand_b=_u(rng, (1,), cr, dtype),
        gamma=Tensor(np.asarray(gamma), requires_grad=True, dtype=dtype),
        ch_w1=_u(rng, (ch_hidden, C), C, dtype),
        ch_w2=_u(rng, (C, ch_hidden), ch_hidden, dtype),
    )


def aniso_fuse(X: Tensor, p: GeoAttnParams) -> Tensor:
    if X.shape[1] % 4:
        raise ConfigError(f"channel count {X.shape[1]} not divisible by 4")
    feats = [ops.conv3d(X, p.branch_w[name], p.branch_b[name]) for name, _ in BRANCHES]
    return ops.conv3d(ops.concat(feats, axis=1), p.fuse_w, p.fuse_b)


def spatial_map(F: Tensor, p: GeoAttnParams) -> Tensor:
    """A = sigmoid(expand(relu(IN(reduce(F))))), shape ``[B, 1, D, H, W]``."""
    h = ops.relu(ops.instance_norm(ops.conv3d(F, p.sp_reduce_w, p.sp_reduce_b)))
    return ops.sigmoid(ops.conv3d(h, p.sp_expand_w, p.sp_expand_b))


def spatial_gate(X: Tensor, F: Tensor, p: GeoAttnParams) -> tuple[Tensor, Tensor]:
    A = spatial_map(F, p)
    gate = ops.expand(ops.add(ops.mul(A, p.gamma), 1.0), X.shape)
    return ops.mul(X, gate), A


def channel_weights(Xs: Tensor, p: GeoAttnParams) -> Tensor:
    """W = sigmoid(MLP(GAP) + MLP(GMP)) with one shared bias-free MLP, shape ``[B, C]``."""
    B = Xs.shape[0]
    pooled = ops.concat([ops.mean(Xs, (2, 3, 4)), ops.max(Xs, (2, 3, 4))], axis=0)
    m = ops.linear(ops.relu(ops.linear(pooled, p.ch_w1)), p.ch_w2)
    return ops.sigmoid(ops.add(ops.slice_axis(m, 0, 0, B), ops.slice_axis(m, 0, B, 2 * B)))


def channel_attention(Xs: Tensor, p: GeoAttnParams) -> Tensor:
    B, C = Xs.shape[:2]
    W = ops.reshape(channel_weights(Xs, p), (B, C, 1, 1, 1))
    return ops.mul(Xs, ops.expand(W, Xs.shape))


def geo_attn_forward(X: Tensor, p: GeoAttnParams) -> Tensor:
    Xs, _ = spatial_gate(X, aniso_fuse(X, p), p)
    return channel_attention(Xs, p)


def geo_tensors(p: GeoAttnParams, prefix: str = "geo.") -> dict[str, Tensor]:
    out = {}
    for name, _ in BRANCHES:
        out[f"{prefix}branch_{name}.weight"] = p.branch_w[name]
        out[f"{prefix}branch_{name}.bias"] = p.branch_b[name]
    for name in ("fuse_w", "fuse_b", "sp_reduce_w", "sp_reduce_b", "sp_expand_w", "sp_expand_b",
                 "gamma", "ch_w1", "ch_w2"):
        out[prefix + name] = getattr(p, name)
    return out
