"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    tol: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e} "
                f"checked={self.checked} skipped={self.skipped}")


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tol: float = 1e-5, seed: int = 0, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` against central differences.

    The output is reduced to a scalar with a fixed random projection so that
    outputs with constant sums (softmax rows, normalised maps) still carry
    information. An element whose one-sided differences disagree by more than
    ``kink_tol`` sits at a non-differentiable point (relu / max) and is skipped.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
    with no_grad():
        base = fn(*inputs).data.copy()
    proj = np.random.default_rng(seed).uniform(0.5, 1.5, size=base.shape)

    # differences against the unperturbed output keep the reduced value small,
    # which keeps round-off in the central difference small
    def scalar() -> float:
        with no_grad():
            return math.fsum(((fn(*inputs).data - base) * proj).ravel())

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = fn(*inputs)
    grads = backward(out, proj)
    f0 = scalar()

    worst, checked, skipped, per_input = 0.0, 0, 0, []
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            local = max(local, relative_error(float(analytic[i]), numeric))
            checked += 1
        per_input.append(local)
        worst = max(worst, local)
    return GradCheckReport(worst, checked, skipped, tol, per_input)
