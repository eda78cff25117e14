"""Hybrid soft-Dice / cross-entropy objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    eps: float = 1e-5
    clamp: float = 1e-7

    def __post_init__(self):
        if self.lambda_dice < 0 or self.lambda_ce < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _class_axes(p: Tensor) -> tuple[int, ...]:
    return (0,) + tuple(range(2, p.ndim))


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def dice_loss(p: Tensor, g: Tensor | np.ndarray, eps: float = 1e-5) -> Tensor:
    """1 - mean over classes of (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps).

    Sums run over batch and all voxels; axis 1 indexes the K classes.
    """
    g = g if isinstance(g, Tensor) else _const(g, p)
    axes = _class_axes(p)
    inter = ops.sum(ops.mul(p, g), axes)
    p_sq = ops.sum(ops.square(p), axes)
    g_sq = _const((g.data * g.data).sum(axis=axes) + eps, p)
    ratio = ops.div(ops.add(ops.scale(inter, 2.0), eps), ops.add(p_sq, g_sq))
    return ops.sub(1.0, ops.mean(ratio))


def ce_loss(p: Tensor, g: Tensor | np.ndarray, clamp: float = 1e-7) -> Tensor:
    """-(1/N) sum_i sum_c g log p, with N the number of voxels in the batch."""
    g = g if isinstance(g, Tensor) else _const(g, p)
    n_vox = p.size // p.shape[1]
    logp = ops.log(ops.clip(p, clamp, 1.0))
    return ops.scale(ops.sum(ops.mul(g, logp)), -1.0 / n_vox)


def total_loss(p: Tensor, g: Tensor | np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    terms = []
    if cfg.lambda_dice:
        terms.append(ops.scale(dice_loss(p, g, cfg.eps), cfg.lambda_dice))
    if cfg.lambda_ce:
        terms.append(ops.scale(ce_loss(p, g, cfg.clamp), cfg.lambda_ce))
    if not terms:
        return ops.scale(ops.sum(p), 0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


def total_loss_from_logits(logits: Tensor, g, cfg: LossConfig = LossConfig()) -> Tensor:
    return total_loss(ops.softmax(logits, axis=1), g, cfg)


def one_hot(mask: np.ndarray, num_classes: int = 2, dtype=np.float32) -> np.ndarray:
    """``[..., D, H, W]`` integer labels -> ``[K, ...]`` indicator array (class axis first)."""
    mask = np.asarray(mask)
    out = np.zeros((num_classes,) + mask.shape, dtype=dtype)
    for c in range(num_classes):
        out[c] = mask == c
    return out
