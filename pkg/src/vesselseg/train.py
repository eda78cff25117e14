"""Patch-based SGD training with cosine annealing and weighted deep supervision."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import ops
from .checkpoint import encode_checkpoint, parse_config_text
from .losses import LossConfig, one_hot, total_loss
from .metrics import overlap_metrics
from .model import SegModel, check_input, forward, predict_volume
from .phantom import VolumeSample
from .tensor import Tensor, backward


class TrainingError(RuntimeError):
    pass


LOG_HEADER = "epoch,lr,train_loss,val_dice"


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 2
    patch: tuple[int, int, int] = (32, 32, 32)
    lr0: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    ds_weights: tuple[float, ...] = (0.5, 0.3, 0.2)
    p_fg: float = 0.5
    seed: int = 0
    val_overlap: float = 0.5
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.ds_weights = tuple(float(w) for w in self.ds_weights)
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError(f"need 0 < lr_min <= lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")
        if not self.ds_weights or min(self.ds_weights) < 0 or sum(self.ds_weights) <= 0:
            raise ValueError(f"ds_weights must be nonnegative with a positive sum, got {self.ds_weights}")
        if not 0.0 <= self.p_fg <= 1.0:
            raise ValueError("p_fg must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def head_weights(self, n_heads: int) -> np.ndarray:
        """Weights for the first ``n_heads`` heads, renormalised to sum to 1."""
        w = np.zeros(n_heads)
        k = min(n_heads, len(self.ds_weights))
        w[:k] = self.ds_weights[:k]
        if w.sum() <= 0:
            raise ValueError("deep-supervision weights for the active heads are all zero")
        return w / w.sum()

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = str(d[f.name]).strip()
            default = getattr(cls, f.name) if f.name not in ("patch", "ds_weights") else None
            if f.name == "patch":
                kw[f.name] = tuple(int(x) for x in raw.replace("x", ",").split(","))
            elif f.name == "ds_weights":
                kw[f.name] = tuple(float(x) for x in raw.split(","))
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return cls(**kw)


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def cosine_lr(epoch: int, total: int, lr0: float, lr_min: float) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"need 0 <= epoch <= total and total >= 1, got {epoch}, {total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
             velocity: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """In-place heavy-ball update: ``v = m*v + g``, ``p -= lr*v``. ``None`` grads count as zero."""
    for p, g, v in zip(params, grads, velocity):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"shape mismatch in sgd_step: {p.shape}")
        v *= momentum
        if g is not None:
            v += g
        p -= lr * v


def sample_patch(sample: VolumeSample, patch: Sequence[int], p_fg: float, rng: np.random.Generator,
                 num_classes: int = 2) -> tuple[np.ndarray, np.ndarray, tuple[int, int, int]]:
    """Crop ``(image [D,H,W], one-hot [K,D,H,W], origin)``; volumes smaller than the patch are zero-padded."""
    patch = tuple(int(p) for p in patch)
    img, mask = sample.image, sample.mask
    if any(s < p for s, p in zip(img.shape, patch)):
        pad = [(0, max(p - s, 0)) for s, p in zip(img.shape, patch)]
        img, mask = np.pad(img, pad), np.pad(mask, pad)
    shape = img.shape
    use_fg = rng.random() < p_fg
    fg = np.flatnonzero(mask) if use_fg else np.empty(0, dtype=np.int64)
    if fg.size:
        center = np.unravel_index(int(fg[rng.integers(fg.size)]), shape)
    else:
        center = tuple(int(rng.integers(s)) for s in shape)
    origin = tuple(int(min(max(c - p // 2, 0), s - p)) for c, p, s in zip(center, patch, shape))
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
    return img[sl].copy(), one_hot(mask[sl], num_classes, dtype=np.float32), origin


def downsample_target(target: np.ndarray, factor: int) -> np.ndarray:
    """Nearest downsampling of ``[B, K, D, H, W]`` one-hot targets."""
    if factor == 1:
        return target
    return np.ascontiguousarray(target[:, :, ::factor, ::factor, ::factor])


def supervised_loss(model: SegModel, x: Tensor, target: np.ndarray, weights: np.ndarray,
                    loss_cfg: LossConfig) -> Tensor:
    heads = forward(model, x)
    total = None
    for level, (logits, w) in enumerate(zip(heads, weights)):
        if w == 0:
            continue
        g = downsample_target(target, 2 ** level).astype(logits.dtype)
        term = ops.scale(total_loss(ops.softmax(logits, axis=1), g, loss_cfg), float(w))
        total = term if total is None else ops.add(total, term)
    return total


def validation_dice(model: SegModel, samples: Sequence[VolumeSample], patch, overlap: float) -> float:
    scores = [overlap_metrics(predict_volume(model, s.image, patch, overlap), s.mask).dice for s in samples]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best_checkpoint: bytes
    best_epoch: int
    best_val_dice: float
    log: list[tuple[int, float, float, float]] = field(default_factory=list)
    seconds: float = 0.0

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write(LOG_HEADER + "\n")
        for epoch, lr, loss, dice in self.log:
            buf.write(f"{epoch},{lr!r},{loss!r},{dice!r}\n")
        return buf.getvalue()


def _first_nonfinite_grad(model: SegModel) -> str | None:
    for name, t in model.params.items():
        if t.grad is not None and not np.isfinite(t.grad).all():
            return name
    return None


def train(model: SegModel, train_set: Sequence[VolumeSample], val_set: Sequence[VolumeSample],
          cfg: TrainConfig, progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train in place; returns the best-validation checkpoint bytes and the per-epoch log."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    check_input(model.config, (1, model.config.in_channels) + tuple(cfg.patch))
    t0 = time.monotonic()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n_heads = model.config.levels if model.config.deep_supervision else 1
    weights = cfg.head_weights(n_heads)
    loss_cfg = LossConfig(lambda_dice=cfg.lambda_dice, lambda_ce=cfg.lambda_ce)
    K = model.config.num_classes
    dtype = params[0].dtype
    extra = {f"train.{k}": v for k, v in cfg.to_dict().items()}
    extra["train.spacing"] = "x".join(str(v) for v in train_set[0].spacing)

    result = TrainResult(b"", 0, -math.inf)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [sample_patch(train_set[i], cfg.patch, cfg.p_fg, rng, K) for i in order[start:start + cfg.batch_size]]
            x = Tensor(np.stack([b[0] for b in batch])[:, None], dtype=dtype)
            target = np.stack([b[1] for b in batch])
            model.zero_grad()
            loss = supervised_loss(model, x, target, weights, loss_cfg)
            value = float(loss.data)
            backward(loss)
            bad = _first_nonfinite_grad(model)
            if not math.isfinite(value) or bad is not None:
                where = f"first non-finite gradient in parameter {bad!r}" if bad else "all gradients finite"
                raise TrainingError(f"non-finite loss {value} at epoch {epoch + 1}, step {start // cfg.batch_size}; "
                                    f"{where}")
            sgd_step([p.data for p in params], [p.grad for p in params], velocity, lr, cfg.momentum)
            losses.append(value)
        val = validation_dice(model, val_set, cfg.patch, cfg.val_overlap)
        result.log.append((epoch + 1, lr, float(np.mean(losses)), val))
        if val > result.best_val_dice:
            result.best_val_dice, result.best_epoch = val, epoch + 1
            result.best_checkpoint = encode_checkpoint(model, extra)
        if progress:
            progress(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.5f} loss={losses[-1]:.4f} "
                     f"mean_loss={np.mean(losses):.4f} val_dice={val:.2f}")
    model.zero_grad()
    result.seconds = time.monotonic() - t0
    return result
