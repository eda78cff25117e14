"""The finite-difference gradient suite: every primitive plus the composite modules."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .geo_attn import geo_attn_forward, geo_tensors, init_geo_attn_params
from .gradcheck import GradCheckReport, grad_check
from .losses import LossConfig, ce_loss, dice_loss, one_hot, total_loss
from .ssm import bim_forward, bim_tensors, init_bim_params
from .tensor import Tensor, backward

GROUPS = ("tensor", "bim", "geoattn", "loss")
COMPOSITE_STEP = 1e-4       # larger step keeps round-off small on deep graphs


@dataclass
class CheckResult:
    group: str
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        return f"[{self.group}] {self.name:<28s} {self.report}"


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _tensor_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor], float]]:
    n = lambda *s: _t(rng.standard_normal(s))          # noqa: E731
    pos = lambda *s: _t(rng.uniform(0.5, 2.0, s))      # noqa: E731
    cases: list[tuple[str, Callable, list[Tensor], float]] = []
    for kind in ("add", "sub", "mul"):
        cases.append((kind, lambda a, b, k=kind: ops.elementwise(k, a, b), [n(2, 3), n(2, 3)], 1e-5))
    cases.append(("div", ops.div, [n(2, 3), pos(2, 3)], 1e-5))
    cases.append(("mul_scalar", lambda a, s: ops.mul(a, s), [n(2, 3), _t(rng.standard_normal())], 1e-5))
    for kind in ("sigmoid", "relu", "silu", "softplus", "exp", "negate", "square"):
        cases.append((kind, lambda a, k=kind: ops.elementwise(k, a), [n(2, 3, 2)], 1e-5))
    cases.append(("log", ops.log, [pos(2, 3)], 1e-5))
    cases.append(("scale", lambda a: ops.scale(a, -1.7), [n(2, 3)], 1e-5))
    cases.append(("clip", lambda a: ops.clip(a, -0.5, 0.5), [n(3, 4)], 1e-5))
    for kind in ("sum", "mean", "max"):
        cases.append((f"{kind}_axes", lambda a, k=kind: ops.reduce(k, a, (1, 2)), [n(2, 3, 4)], 1e-5))
        cases.append((f"{kind}_all", lambda a, k=kind: ops.reduce(k, a), [n(2, 3)], 1e-5))
    cases.append(("reshape", lambda a: ops.reshape(a, (3, 4)), [n(2, 6)], 1e-5))
    cases.append(("permute", lambda a: ops.permute(a, (2, 0, 1)), [n(2, 3, 4)], 1e-5))
    cases.append(("reverse_axis", lambda a: ops.reverse_axis(a, 1), [n(2, 3, 2)], 1e-5))
    cases.append(("expand", lambda a: ops.expand(a, (2, 3, 4)), [n(2, 1, 4)], 1e-5))
    cases.append(("concat", lambda a, b: ops.concat([a, b], axis=1), [n(2, 2), n(2, 3)], 1e-5))
    cases.append(("slice_axis", lambda a: ops.slice_axis(a, 1, 1, 3), [n(2, 4)], 1e-5))
    cases.append(("linear", ops.linear, [n(2, 3, 4), n(5, 4), n(5)], 1e-5))
    cases.append(("batched_matmul", ops.batched_matmul, [n(2, 3, 4), n(2, 4, 2)], 1e-5))
    cases.append(("conv3d_3x3x3", ops.conv3d, [n(1, 2, 4, 4, 4), n(3, 2, 3, 3, 3), n(3)], 1e-5))
    cases.append(("conv3d_1x3x3", ops.conv3d, [n(2, 2, 3, 4, 4), n(2, 2, 1, 3, 3), n(2)], 1e-5))
    cases.append(("conv3d_3x1x3", ops.conv3d, [n(1, 2, 4, 3, 4), n(2, 2, 3, 1, 3)], 1e-5))
    cases.append(("conv3d_1x1x1", ops.conv3d, [n(2, 3, 2, 3, 2), n(4, 3, 1, 1, 1), n(4)], 1e-5))
    cases.append(("down_conv", ops.down_conv, [n(1, 2, 4, 4, 4), n(3, 2, 2, 2, 2)], 1e-5))
    cases.append(("upsample_nearest", ops.upsample_nearest, [n(1, 2, 2, 2, 2)], 1e-5))
    cases.append(("instance_norm", ops.instance_norm, [n(2, 3, 2, 3, 2)], 1e-5))
    cases.append(("layer_norm_channels", ops.layer_norm_channels, [n(2, 4, 2, 2, 3), n(4), n(4)], 1e-5))
    cases.append(("softmax", lambda a: ops.softmax(a, axis=1), [n(2, 3, 2, 2, 2)], 1e-5))
    cases.append(("causal_depthwise_conv1d", ops.causal_depthwise_conv1d, [n(2, 5, 3), n(3, 3), n(3)], 1e-5))
    cases.append(("selective_scan", ops.selective_scan_core,
                  [n(2, 4, 3), pos(2, 4, 3), _t(-rng.uniform(0.2, 1.5, (3, 2))),
                   n(2, 4, 2), n(2, 4, 2), n(3)], 1e-5))
    return cases


def _randomise(tensors, rng: np.random.Generator, skip=()) -> None:
    for name, t in tensors.items():
        if not any(s in name for s in skip):
            t.data[...] = rng.uniform(-0.6, 0.6, t.shape)


def _bim_cases(rng: np.random.Generator):
    cases = []
    for shared in (True, False):
        p = init_bim_params(4, state_size=3, expand=2, rng=rng, dtype=np.float64, shared=shared)
        tensors = bim_tensors(p)
        _randomise(tensors, rng, skip=("A_log",))
        x = _t(rng.standard_normal((1, 4, 4, 2, 3)))
        names = ["x"] + list(tensors)
        inputs = [x] + list(tensors.values())

        def fn(x, *rest, p=p):
            return bim_forward(x, p)

        cases.append(("bim_forward" + ("" if shared else "_unshared"), fn, inputs, COMPOSITE_STEP, names))
    return cases


# The branch / fuse / spatial-reduce biases shift a map that is then instance
# normalised, so their exact gradient is zero and they are checked separately.
GEO_DEAD_BIASES = ("branch_xy.bias", "branch_yz.bias", "branch_xz.bias", "branch_3d.bias",
                   "fuse_b", "sp_reduce_b")


def _geo_params(rng: np.random.Generator):
    p = init_geo_attn_params(8, rng=rng, dtype=np.float64, reduction=4, gamma=0.7)
    tensors = geo_tensors(p)
    _randomise(tensors, rng, skip=("gamma",))
    return p, tensors


def _geo_cases(rng: np.random.Generator):
    p, tensors = _geo_params(rng)
    live = {k: v for k, v in tensors.items() if not k.endswith(GEO_DEAD_BIASES)}
    x = _t(rng.standard_normal((2, 8, 3, 4, 2)))

    def fn(x, *rest):
        return geo_attn_forward(x, p)

    return [("geo_attn_forward", fn, [x] + list(live.values()), COMPOSITE_STEP, ["x"] + list(live))]


def geo_dead_bias_gradient(seed: int = 0) -> float:
    """Largest analytic gradient magnitude on the biases that instance norm cancels."""
    rng = np.random.default_rng(seed)
    p, tensors = _geo_params(rng)
    x = Tensor(rng.standard_normal((2, 8, 3, 4, 2)))
    out = geo_attn_forward(x, p)
    grads = backward(out, rng.uniform(0.5, 1.5, out.shape))
    return max(float(np.abs(grads.get(t, np.zeros(1))).max())
               for k, t in tensors.items() if k.endswith(GEO_DEAD_BIASES))


def _loss_cases(rng: np.random.Generator):
    def probs(shape):
        p = rng.uniform(0.05, 1.0, shape)
        return _t(p / p.sum(axis=1, keepdims=True))

    mask = rng.random((2, 3, 3, 2)) < 0.4
    g = np.moveaxis(one_hot(mask, 2, np.float64), 0, 1)
    cases = [
        ("dice_loss", lambda p: dice_loss(p, g), [probs(g.shape)], 1e-5),
        ("ce_loss", lambda p: ce_loss(p, g), [probs(g.shape)], 1e-5),
        ("total_loss", lambda p: total_loss(p, g), [probs(g.shape)], 1e-5),
        ("total_loss_from_logits", lambda z: total_loss(ops.softmax(z, axis=1), g, LossConfig(0.7, 1.3)),
         [_t(rng.standard_normal(g.shape))], 1e-5),
    ]
    return cases


def run_suite(groups=GROUPS, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown check groups {sorted(unknown)}; choose from {GROUPS}")
    rng = np.random.default_rng(seed)
    results = []
    builders = {
        "tensor": lambda: [c + (None,) for c in _tensor_cases(rng)],
        "bim": lambda: _bim_cases(rng),
        "geoattn": lambda: _geo_cases(rng),
        "loss": lambda: [c + (None,) for c in _loss_cases(rng)],
    }
    for group in GROUPS:
        if group not in groups:
            continue
        for name, fn, inputs, step, _ in builders[group]():
            results.append(CheckResult(group, name, grad_check(fn, inputs, step=step, tol=tol)))
    return results


def format_results(results: list[CheckResult], seconds: float | None = None) -> str:
    lines = [r.line() for r in results]
    n_pass = sum(r.passed for r in results)
    tail = f"{n_pass}/{len(results)} checks passed"
    if seconds is not None:
        tail += f" in {seconds:.1f}s"
    return "\n".join(lines + [tail])


def timed_suite(groups=GROUPS, seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.monotonic()
    res = run_suite(groups, seed)
    return res, time.monotonic() - t0
