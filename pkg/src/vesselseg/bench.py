"""Depth-scaling micro-benchmark: bidirectional scan vs quadratic depth attention."""

from __future__ import annotations

import contextlib
import io
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .ssm import bim_forward, init_bim_params, make_depth_sequences
from .tensor import Tensor, no_grad

BENCH_HEADER = "method,depth,mean_s,std_s,peak_bytes"
METHODS = ("bim_scan", "depth_attention")


def depth_attention(seq: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(C)) V along the sequence axis of ``[N, T, C]``."""
    N, T, C = seq.shape
    q, k, v = (ops.linear(seq, w) for w in (wq, wk, wv))
    scores = ops.scale(ops.batched_matmul(q, ops.permute(k, (0, 2, 1))), 1.0 / np.sqrt(C))
    return ops.batched_matmul(ops.softmax(scores, axis=2), v)


@dataclass
class BenchRow:
    method: str
    depth: int
    times: list[float]
    peak_bytes: int

    @property
    def mean_s(self) -> float:
        return statistics.fmean(self.times)

    @property
    def std_s(self) -> float:
        return statistics.pstdev(self.times)

    @property
    def median_s(self) -> float:
        return statistics.median(self.times)


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, method: str, depth: int) -> BenchRow:
        return next(r for r in self.rows if r.method == method and r.depth == depth)

    def doubling_ratios(self, method: str) -> dict[int, float]:
        """``{D: median t(D) / median t(D/2)}`` for every D whose half was also measured."""
        by_d = {r.depth: r.median_s for r in self.rows if r.method == method}
        return {d: by_d[d] / by_d[d // 2] for d in sorted(by_d) if d % 2 == 0 and d // 2 in by_d}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(BENCH_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r.method},{r.depth},{r.mean_s:.6e},{r.std_s:.6e},{r.peak_bytes}\n")
        return buf.getvalue()


@contextlib.contextmanager
def single_thread():
    """Limit BLAS pools to one thread when threadpoolctl is available."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn()
        return max(tracemalloc.get_traced_memory()[1] - base, 0)
    finally:
        tracemalloc.stop()


def _time(fn, repeats: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench_scaling(depths: Sequence[int] = (16, 32, 64, 128), batch: int = 1, channels: int = 32,
                  height: int = 8, width: int = 8, repeats: int = 5, warmup: int = 2,
                  seed: int = 0, threads_one: bool = True) -> BenchReport:
    """Time forward passes of both methods on bit-identical inputs for each depth."""
    depths = [int(d) for d in depths]
    if len(set(depths)) != len(depths) or depths != sorted(depths) or min(depths) < 1:
        raise ValueError(f"depths must be distinct, ascending and positive, got {depths}")
    rng = np.random.default_rng(seed)
    bim = init_bim_params(channels, rng=rng)
    bound = 1.0 / np.sqrt(channels)
    wq, wk, wv = (Tensor(rng.uniform(-bound, bound, (channels, channels)), dtype=np.float32) for _ in range(3))
    report = BenchReport()
    guard = single_thread() if threads_one else contextlib.nullcontext()
    with guard, no_grad():
        for d in depths:
            x = Tensor(rng.standard_normal((batch, channels, d, height, width)), dtype=np.float32)
            runs = {
                "bim_scan": lambda: bim_forward(x, bim),
                "depth_attention": lambda: depth_attention(make_depth_sequences(x), wq, wk, wv),
            }
            for method in METHODS:
                fn = runs[method]
                times = _time(fn, repeats, warmup)
                report.rows.append(BenchRow(method, d, times, _peak_bytes(fn)))
    return report
