"""Bidirectional depth-wise state-space block.

Every (b, h, w) column of a ``[B, C, D, H, W]`` feature map is treated as a
length-D sequence. One selective-scan block runs over the sequences forwards
and over their reversal, the two results are summed and added back to the
input, and a pre-normalised channel MLP follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _const(value, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


@dataclass
class SSMParams:
    """Selective-scan parameters; ``in_proj`` is ``None`` for a bare scan."""

    A_log: Tensor            # [E, S]; A = -exp(A_log) < 0
    D_skip: Tensor           # [E]
    delta_w: Tensor          # [E, E]
    delta_b: Tensor          # [E]
    B_proj: Tensor           # [S, E]
    C_proj: Tensor           # [S, E]
    in_proj: Tensor | None = None    # [2E, C]
    conv_w: Tensor | None = None     # [E, k_c]
    conv_b: Tensor | None = None     # [E]
    out_proj: Tensor | None = None   # [C, E]

    @property
    def inner_dim(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    @property
    def bare(self) -> bool:
        return self.in_proj is None


def init_ssm_params(channels: int, state_size: int = 8, expand: int = 2, conv_width: int = 3,
                    rng: np.random.Generator | None = None, dtype=np.float32,
                    bare: bool = False, delta_init: float = 0.05) -> SSMParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    E = channels if bare else expand * channels
    S = state_size
    a_log = np.log(np.arange(1, S + 1, dtype=np.float64))[None, :].repeat(E, axis=0)
    p = SSMParams(
        A_log=Tensor(a_log, requires_grad=True, dtype=dtype),
        D_skip=_const(1.0, (E,), dtype),
        delta_w=_uniform(rng, (E, E), E, dtype),
        delta_b=_const(np.log(np.expm1(delta_init)), (E,), dtype),
        B_proj=_uniform(rng, (S, E), E, dtype),
        C_proj=_uniform(rng, (S, E), E, dtype),
    )
    if not bare:
        p.in_proj = _uniform(rng, (2 * E, channels), channels, dtype)
        p.conv_w = _uniform(rng, (E, conv_width), conv_width, dtype)
        p.conv_b = _const(0.0, (E,), dtype)
        p.out_proj = _const(0.0, (channels, E), dtype)
    return p


def decay_factors(seq: Tensor, params: SSMParams) -> np.ndarray:
    """exp(delta * A) for every (n, t, e, s); all entries lie in (0, 1)."""
    delta = ops.softplus(ops.linear(seq, params.delta_w, params.delta_b)).data
    A = -np.exp(params.A_log.data)
    return np.exp(delta[..., None] * A)


def selective_scan(seq: Tensor, params: SSMParams) -> Tensor:
    """Input-dependent scan over axis 1 of ``[N, T, E]``."""
    delta = ops.softplus(ops.linear(seq, params.delta_w, params.delta_b))
    A = ops.negate(ops.exp(params.A_log))
    Bm = ops.linear(seq, params.B_proj)
    Cm = ops.linear(seq, params.C_proj)
    return ops.selective_scan_core(seq, delta, A, Bm, Cm, params.D_skip)


def mamba_block(seq: Tensor, params: SSMParams) -> Tensor:
    """Gated block: in-projection, causal depthwise conv, SiLU, scan, gate, out-projection."""
    if params.bare:
        return selective_scan(seq, params)
    E = params.inner_dim
    u, gate = ops.split(ops.linear(seq, params.in_proj), [E, E], axis=2)
    u = ops.silu(ops.causal_depthwise_conv1d(u, params.conv_w, params.conv_b))
    y = selective_scan(u, params)
    return ops.linear(ops.mul(y, ops.silu(gate)), params.out_proj)


@dataclass
class BiMParams:
    ssm: SSMParams
    norm_gain: Tensor      # [C]
    norm_shift: Tensor     # [C]
    mlp_w1: Tensor         # [rC, C]
    mlp_w2: Tensor         # [C, rC]
    ssm_reverse: SSMParams | None = None   # only when directions are unshared

    @property
    def ratio(self) -> int:
        return self.mlp_w1.shape[0] // self.mlp_w1.shape[1]


def init_bim_params(channels: int, state_size: int = 8, expand: int = 2, mlp_ratio: int = 2,
                    conv_width: int = 3, rng: np.random.Generator | None = None, dtype=np.float32,
                    shared: bool = True, bare_scan: bool = False) -> BiMParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    kw = dict(state_size=state_size, expand=expand, conv_width=conv_width, dtype=dtype, bare=bare_scan)
    ssm = init_ssm_params(channels, rng=rng, **kw)
    rev = None if shared else init_ssm_params(channels, rng=rng, **kw)
    hidden = mlp_ratio * channels
    return BiMParams(
        ssm=ssm,
        norm_gain=_const(1.0, (channels,), dtype),
        norm_shift=_const(0.0, (channels,), dtype),
        mlp_w1=_uniform(rng, (hidden, channels), channels, dtype),
        mlp_w2=_const(0.0, (channels, hidden), dtype),
        ssm_reverse=rev,
    )


def make_depth_sequences(x: Tensor) -> Tensor:
    """``[B, C, D, H, W] -> [B*H*W, D, C]``; sequence index is b*H*W + h*W + w."""
    B, C, D, H, W = x.shape
    return ops.reshape(ops.permute(x, (0, 3, 4, 2, 1)), (B * H * W, D, C))


def inverse_depth_sequences(seq: Tensor, shape: tuple[int, int, int, int, int]) -> Tensor:
    B, C, D, H, W = shape
    return ops.permute(ops.reshape(seq, (B, H, W, D, C)), (0, 4, 3, 1, 2))


def bidirectional_mix(seq: Tensor, params: BiMParams) -> Tensor:
    """z = M(seq) + Rev(M'(Rev(seq))), with M' = M unless directions are unshared."""
    rev = ops.reverse_axis(seq, 1)
    if params.ssm_reverse is None:
        n = seq.shape[0]
        both = mamba_block(ops.concat([seq, rev], axis=0), params.ssm)
        fwd = ops.slice_axis(both, 0, 0, n)
        bwd = ops.slice_axis(both, 0, n, 2 * n)
    else:
        fwd = mamba_block(seq, params.ssm)
        bwd = mamba_block(rev, params.ssm_reverse)
    return ops.add(fwd, ops.reverse_axis(bwd, 1))


def _pointwise(x: Tensor, w: Tensor) -> Tensor:
    return ops.conv3d(x, ops.reshape(w, w.shape + (1, 1, 1)))


def bim_forward(x: Tensor, params: BiMParams) -> Tensor:
    z = bidirectional_mix(make_depth_sequences(x), params)
    x1 = ops.add(x, inverse_depth_sequences(z, x.shape))
    h = ops.layer_norm_channels(x1, params.norm_gain, params.norm_shift)
    return ops.add(x1, _pointwise(ops.silu(_pointwise(h, params.mlp_w1)), params.mlp_w2))


def ssm_tensors(params: SSMParams, prefix: str) -> dict[str, Tensor]:
    out = {}
    for name in ("in_proj", "conv_w", "conv_b", "A_log", "D_skip", "delta_w", "delta_b",
                 "B_proj", "C_proj", "out_proj"):
        t = getattr(params, name)
        if t is not None:
            out[f"{prefix}{name}"] = t
    return out


def bim_tensors(params: BiMParams, prefix: str = "bim.") -> dict[str, Tensor]:
    out = ssm_tensors(params.ssm, prefix + "ssm.")
    if params.ssm_reverse is not None:
        out.update(ssm_tensors(params.ssm_reverse, prefix + "ssm_reverse."))
    for name in ("norm_gain", "norm_shift", "mlp_w1", "mlp_w2"):
        out[prefix + name] = getattr(params, name)
    return out
