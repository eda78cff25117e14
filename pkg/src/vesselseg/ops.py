"""Differentiable primitives.

Binary elementwise ops accept identical shapes, or a 0-d tensor / Python
number on either side. Anything else must be broadcast explicitly with
:func:`expand`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DomainError, Function, ShapeError, Tensor, as_tensor

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = as_tensor(a, like=ref)
    b = as_tensor(b, like=ref)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        for i, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise ShapeError(f"operand extents differ at dim {i}: {a.shape} vs {b.shape}", dim=i)
        raise ShapeError(f"operand ranks differ: {a.shape} vs {b.shape}", dim="rank")
    return a, b


def _c(x: np.ndarray) -> np.ndarray:
    return x if x.flags.c_contiguous else x.copy(order="C")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


def add(a, b) -> Tensor:
    return Add.apply(*_binary_operands(a, b))


def sub(a, b) -> Tensor:
    return Sub.apply(*_binary_operands(a, b))


def mul(a, b) -> Tensor:
    return Mul.apply(*_binary_operands(a, b))


def div(a, b) -> Tensor:
    return Div.apply(*_binary_operands(a, b))


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1 - self.y),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, g):
        return (g * self.mask,)


class Silu(Function):
    def forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, g):
        s = self.s
        return (g * (s * (1 + self.x * (1 - s))),)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(np.zeros((), dtype=x.dtype), x).astype(x.dtype)

    def backward(self, g):
        return (g * _sigmoid(self.x),)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class Log(Function):
    def forward(self, x):
        if np.any(x <= 0):
            raise DomainError("log of non-positive input")
        self.x = x
        return np.log(x)

    def backward(self, g):
        return (g / self.x,)


class Negate(Function):
    def forward(self, x):
        return -x

    def backward(self, g):
        return (-g,)


class Scale(Function):
    def forward(self, x, factor=1.0):
        self.factor = x.dtype.type(factor)
        return x * self.factor

    def backward(self, g):
        return (g * self.factor,)


class Square(Function):
    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, g):
        return (2 * g * self.x,)


class Clip(Function):
    def forward(self, x, lo=None, hi=None):
        lo_ = -np.inf if lo is None else lo
        hi_ = np.inf if hi is None else hi
        self.mask = (x >= lo_) & (x <= hi_)
        return np.clip(x, lo_, hi_).astype(x.dtype)

    def backward(self, g):
        return (g * self.mask,)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def silu(x: Tensor) -> Tensor:
    return Silu.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def negate(x: Tensor) -> Tensor:
    return Negate.apply(x)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def square(x: Tensor) -> Tensor:
    return Square.apply(x)


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input was inside."""
    return Clip.apply(x, lo=lo, hi=hi)


_UNARY = {
    "sigmoid": sigmoid, "relu": relu, "silu": silu, "softplus": softplus,
    "exp": exp, "log": log, "negate": negate, "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if kind in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    if kind in _UNARY:
        (x,) = operands
        return _UNARY[kind](x)
    if kind == "scale":
        (x,) = operands
        return scale(x, 1.0 if factor is None else factor)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}", dim=a)
    out = tuple(sorted(a % ndim for a in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated reduction axes {axes}", dim="axes")
    return out


class Sum(Function):
    def forward(self, x, axes=(), keepdims=False):
        self.shape, self.axes, self.keepdims = x.shape, axes, keepdims
        return np.asarray(x.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axes=(), keepdims=False):
        self.shape, self.axes, self.keepdims = x.shape, axes, keepdims
        self.count = int(np.prod([x.shape[a] for a in axes]))
        return np.asarray(x.mean(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g / g.dtype.type(self.count), self.shape).copy(),)


class Max(Function):
    def forward(self, x, axes=(), keepdims=False):
        self.shape, self.axes, self.keepdims = x.shape, axes, keepdims
        keep = [a for a in range(x.ndim) if a not in axes]
        perm = keep + list(axes)
        self.perm = perm
        moved = np.transpose(x, perm)
        lead = moved.shape[: len(keep)]
        flat = moved.reshape(lead + (-1,))
        # np.argmax returns the first maximal element
        self.arg = flat.argmax(axis=-1)
        self.moved_shape = moved.shape
        out = np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = np.expand_dims(out, axes)
        return _c(out)

    def backward(self, g):
        if self.keepdims:
            g = np.squeeze(g, axis=self.axes)
        lead = self.moved_shape[: len(self.perm) - len(self.axes)]
        flat = np.zeros(lead + (int(np.prod(self.moved_shape[len(lead):])),), dtype=g.dtype)
        np.put_along_axis(flat, self.arg[..., None], g[..., None], axis=-1)
        moved = flat.reshape(self.moved_shape)
        return (_c(np.transpose(moved, np.argsort(self.perm))),)


def reduce(kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (``None`` = all axes; empty = identity)."""
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return x
    ax = _norm_axes(axes, x.ndim)
    cls = {"sum": Sum, "mean": Mean, "max": Max}.get(kind)
    if cls is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return cls.apply(x, axes=ax, keepdims=keepdims)


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axes, keepdims)


def max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("max", x, axes, keepdims)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Permute(Function):
    def forward(self, x, perm=()):
        self.perm = perm
        return _c(np.transpose(x, perm))

    def backward(self, g):
        return (_c(np.transpose(g, np.argsort(self.perm))),)


class ReverseAxis(Function):
    def forward(self, x, axis=0):
        self.axis = axis
        return _c(np.flip(x, axis))

    def backward(self, g):
        return (_c(np.flip(g, self.axis)),)


class Expand(Function):
    def forward(self, x, shape=()):
        self.axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
        return _c(np.broadcast_to(x, shape))

    def backward(self, g):
        return (g.sum(axis=self.axes, keepdims=True),)


class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [x.shape[axis] for x in xs])
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        out = []
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[self.axis] = slice(int(lo), int(hi))
            out.append(_c(g[tuple(idx)]))
        return tuple(out)


class Slice(Function):
    def forward(self, x, axis=0, start=0, stop=None):
        self.shape, self.axis, self.start = x.shape, axis, start
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        self.idx = tuple(idx)
        return _c(x[self.idx])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.idx] = g
        return (out,)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}", dim="size")
    return Reshape.apply(x, shape=shape)


def permute(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(f"{perm} is not a permutation of {x.ndim} axes", dim="perm")
    return Permute.apply(x, perm=perm)


def reverse_axis(x: Tensor, axis: int) -> Tensor:
    return ReverseAxis.apply(x, axis=axis % x.ndim)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast singleton extents of ``x`` up to ``shape`` (ranks must match)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != x.ndim:
        raise ShapeError(f"expand needs equal ranks, got {x.shape} -> {shape}", dim="rank")
    for i, (a, b) in enumerate(zip(x.shape, shape)):
        if a != b and a != 1:
            raise ShapeError(f"cannot expand dim {i} from {a} to {b}", dim=i)
    if shape == x.shape:
        return x
    return Expand.apply(x, shape=shape)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        for i, (a, b) in enumerate(zip(ref.shape, t.shape)):
            if i != axis and a != b:
                raise ShapeError(f"concat extents differ at dim {i}: {ref.shape} vs {t.shape}", dim=i)
    return Concat.apply(*xs, axis=axis)


def slice_axis(x: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
    return Slice.apply(x, axis=axis % x.ndim, start=start, stop=stop)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    out, lo = [], 0
    for s in sizes:
        out.append(slice_axis(x, axis, lo, lo + s))
        lo += s
    if lo != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {x.shape[axis]}", dim=axis)
    return out


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------


class Linear(Function):
    def forward(self, x, w, b=None):
        self.x, self.w, self.has_b = x, w, b is not None
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    def backward(self, g):
        cin = self.x.shape[-1]
        g2 = g.reshape(-1, g.shape[-1])
        x2 = self.x.reshape(-1, cin)
        gx = (g2 @ self.w).reshape(self.x.shape)
        gw = g2.T @ x2
        if self.has_b:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.ndim != 2:
        raise ShapeError(f"weight must be 2-D, got {weight.shape}", dim="weight")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input last extent {x.shape[-1]} != weight Cin {weight.shape[1]}", dim=x.ndim - 1)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="bias")
        return Linear.apply(x, weight, bias)
    return Linear.apply(x, weight)


class BatchedMatmul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ g


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[N, T, K] @ [N, K, M] -> [N, T, M]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"cannot batch-multiply {a.shape} by {b.shape}", dim="matmul")
    return BatchedMatmul.apply(a, b)


def _im2col(xp: np.ndarray, ksize: tuple[int, int, int], out_sp: tuple[int, int, int]) -> np.ndarray:
    """Columns ``[B, Cin*kd*kh*kw, D*H*W]`` of a padded input."""
    B, C = xp.shape[:2]
    kd, kh, kw = ksize
    D, H, W = out_sp
    cols = np.empty((B, C, kd * kh * kw, D, H, W), dtype=xp.dtype)
    k = 0
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                cols[:, :, k] = xp[:, :, i:i + D, j:j + H, l:l + W]
                k += 1
    return cols.reshape(B, C * kd * kh * kw, D * H * W)


class Conv3d(Function):
    def forward(self, x, w, b=None):
        B, Cin, D, H, W = x.shape
        Cout, _, kd, kh, kw = w.shape
        self.x_shape, self.w, self.has_b = x.shape, w, b is not None
        self.pads = ((kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
        cols = self._cols(x)
        if any(self.needs_input_grad):
            self.cols = cols
        out = np.matmul(w.reshape(Cout, -1), cols)
        if b is not None:
            out += b[None, :, None]
        return out.reshape(B, Cout, D, H, W)

    def _cols(self, x):
        B, Cin, D, H, W = x.shape
        ks = self.w.shape[2:]
        if ks == (1, 1, 1):
            return x.reshape(B, Cin, D * H * W)
        pd, ph, pw = self.pads
        xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        return _im2col(xp, ks, (D, H, W))

    def backward(self, g):
        w = self.w
        B, Cin, D, H, W = self.x_shape
        Cout, _, kd, kh, kw = w.shape
        g2 = g.reshape(B, Cout, D * H * W)
        gw = np.matmul(g2, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        self.cols = None
        gx = None
        if self.needs_input_grad[0]:
            gcols = np.matmul(w.reshape(Cout, -1).T, g2)
            if (kd, kh, kw) == (1, 1, 1):
                gx = gcols.reshape(self.x_shape)
            else:
                pd, ph, pw = self.pads
                gcols = gcols.reshape(B, Cin, kd * kh * kw, D, H, W)
                gxp = np.zeros((B, Cin, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
                k = 0
                for i in range(kd):
                    for j in range(kh):
                        for l in range(kw):
                            gxp[:, :, i:i + D, j:j + H, l:l + W] += gcols[:, :, k]
                            k += 1
                gx = _c(gxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W])
        if self.has_b:
            return gx, gw, g2.sum(axis=(0, 2))
        return gx, gw


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 3-D convolution with zero "same" padding (odd kernels only)."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [B,C,D,H,W], got {x.shape}", dim="rank")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [Cout,Cin,kd,kh,kw], got {weight.shape}", dim="kernel")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel Cin {weight.shape[1]} != input channels {x.shape[1]}", dim="Cin")
    for name, k in zip(("kd", "kh", "kw"), weight.shape[2:]):
        if k % 2 == 0:
            raise ShapeError(f"kernel extent {name}={k} must be odd", dim=name)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="Cout")
        return Conv3d.apply(x, weight, bias)
    return Conv3d.apply(x, weight)


class DownConv(Function):
    """2x2x2 stride-2 convolution without padding (non-overlapping patches)."""

    def forward(self, x, w):
        B, C, D, H, W = x.shape
        self.x_shape, self.w = x.shape, w
        blocks = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
        cols = blocks.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(B, C * 8, -1)
        self.cols = cols
        out = np.matmul(w.reshape(w.shape[0], -1), cols)
        return out.reshape(B, w.shape[0], D // 2, H // 2, W // 2)

    def backward(self, g):
        B, C, D, H, W = self.x_shape
        Cout = self.w.shape[0]
        g2 = g.reshape(B, Cout, -1)
        gw = np.matmul(g2, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w.shape)
        gcols = np.matmul(self.w.reshape(Cout, -1).T, g2)
        gx = gcols.reshape(B, C, 2, 2, 2, D // 2, H // 2, W // 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return _c(gx).reshape(self.x_shape), gw


def down_conv(x: Tensor, weight: Tensor) -> Tensor:
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"down_conv needs even spatial extents, got {x.shape[2:]}", dim="spatial")
    if weight.shape[1:] != (x.shape[1], 2, 2, 2):
        raise ShapeError(f"down_conv kernel {weight.shape} incompatible with {x.shape[1]} channels", dim="Cin")
    return DownConv.apply(x, weight)


class UpsampleNearest(Function):
    def forward(self, x):
        B, C, D, H, W = x.shape
        self.x_shape = x.shape
        out = np.broadcast_to(x[:, :, :, None, :, None, :, None], (B, C, D, 2, H, 2, W, 2))
        return _c(out).reshape(B, C, 2 * D, 2 * H, 2 * W)

    def backward(self, g):
        B, C, D, H, W = self.x_shape
        return (g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)


def upsample_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the three spatial axes."""
    return UpsampleNearest.apply(x)


class CausalDepthwiseConv1d(Function):
    """Per-channel causal convolution along axis 1 of ``[N, T, E]``."""

    def forward(self, u, w, b):
        N, T, E = u.shape
        k = w.shape[1]
        self.u, self.w = u, w
        out = np.broadcast_to(b, u.shape).copy()
        for j in range(k):
            shift = k - 1 - j
            if shift >= T:
                continue
            out[:, shift:] += u[:, : T - shift] * w[:, j]
        return out

    def backward(self, g):
        u, w = self.u, self.w
        N, T, E = u.shape
        k = w.shape[1]
        gu = np.zeros_like(u)
        gw = np.zeros_like(w)
        for j in range(k):
            shift = k - 1 - j
            if shift >= T:
                continue
            gu[:, : T - shift] += g[:, shift:] * w[:, j]
            gw[:, j] = (g[:, shift:] * u[:, : T - shift]).sum(axis=(0, 1))
        return gu, gw, g.sum(axis=(0, 1))


def causal_depthwise_conv1d(u: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if weight.ndim != 2 or weight.shape[0] != u.shape[-1]:
        raise ShapeError(f"depthwise kernel {weight.shape} incompatible with {u.shape}", dim="E")
    return CausalDepthwiseConv1d.apply(u, weight, bias)


# ---------------------------------------------------------------------------
# normalisation and softmax
# ---------------------------------------------------------------------------


class _NormOverAxes(Function):
    axes: tuple[int, ...] = ()

    def _normalise(self, x, eps):
        mu = x.mean(axis=self.axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=self.axes, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = xc * self.inv
        return self.xhat

    def _grad_xhat(self, gxhat):
        m = gxhat.mean(axis=self.axes, keepdims=True)
        mx = (gxhat * self.xhat).mean(axis=self.axes, keepdims=True)
        return self.inv * (gxhat - m - self.xhat * mx)


class InstanceNorm(_NormOverAxes):
    axes = (2, 3, 4)

    def forward(self, x, eps=1e-5):
        return self._normalise(x, eps)

    def backward(self, g):
        return (self._grad_xhat(g),)


class LayerNormChannels(_NormOverAxes):
    axes = (1,)

    def forward(self, x, gain, shift, eps=1e-5):
        xhat = self._normalise(x, eps)
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        self.gain_b = gain.reshape(bshape)
        return xhat * self.gain_b + shift.reshape(bshape)

    def backward(self, g):
        red = (0,) + tuple(range(2, g.ndim))
        ggain = (g * self.xhat).sum(axis=red)
        gshift = g.sum(axis=red)
        return self._grad_xhat(g * self.gain_b), ggain, gshift


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over D,H,W (biased variance, no affine)."""
    if x.ndim != 5:
        raise ShapeError(f"instance_norm input must be [B,C,D,H,W], got {x.shape}", dim="rank")
    if x.shape[2] * x.shape[3] * x.shape[4] < 2:
        raise ShapeError("instance_norm needs at least 2 spatial positions", dim="spatial")
    return InstanceNorm.apply(x, eps=eps)


def layer_norm_channels(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over axis 1 at every other index, then per-channel gain/shift."""
    C = x.shape[1]
    if gain.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"gain/shift must have shape ({C},)", dim="C")
    return LayerNormChannels.apply(x, gain, shift, eps=eps)


class Softmax(Function):
    def forward(self, x, axis=1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return Softmax.apply(x, axis=axis % x.ndim)


# ---------------------------------------------------------------------------
# selective scan
# ---------------------------------------------------------------------------


class SelectiveScan(Function):
    """Diagonal selective state-space recurrence, one left-to-right pass.

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
    y_t = sum_s C_t[s] h_t[:, s] + D * u_t
    """

    def forward(self, u, delta, A, Bm, Cm, Dv):
        N, T, E = u.shape
        dA = np.exp(delta[..., None] * A)
        dBu = (delta * u)[..., None] * Bm[:, :, None, :]
        hs = np.empty_like(dA)
        h = np.zeros((N, E, A.shape[1]), dtype=u.dtype)
        for t in range(T):
            h = dA[:, t] * h + dBu[:, t]
            hs[:, t] = h
        y = np.matmul(hs, Cm[..., None])[..., 0] + u * Dv
        self.saved = (u, delta, A, Bm, Cm, Dv, dA, hs)
        return y

    def backward(self, g):
        u, delta, A, Bm, Cm, Dv, dA, hs = self.saved
        N, T, E = u.shape
        gu = g * Dv
        gD = (g * u).sum(axis=(0, 1))
        gC = np.matmul(g[:, :, None, :], hs)[:, :, 0, :]
        gH = g[..., None] * Cm[:, :, None, :]
        for t in range(T - 2, -1, -1):
            gH[:, t] += dA[:, t + 1] * gH[:, t + 1]
        h_prev = np.zeros_like(hs)
        h_prev[:, 1:] = hs[:, :-1]
        g_dA = gH * h_prev * dA
        gHB = np.matmul(gH, Bm[..., None])[..., 0]
        gdelta = (g_dA * A).sum(axis=-1) + gHB * u
        gA = (g_dA * delta[..., None]).sum(axis=(0, 1))
        gB = np.matmul((delta * u)[:, :, None, :], gH)[:, :, 0, :]
        gu = gu + gHB * delta
        return gu, gdelta, gA, gB, gC, gD


def selective_scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Scan with precomputed positive step sizes ``delta`` and negative ``A``."""
    N, T, E = u.shape
    if delta.shape != u.shape:
        raise ShapeError(f"delta shape {delta.shape} != input shape {u.shape}", dim="delta")
    if A.ndim != 2 or A.shape[0] != E:
        raise ShapeError(f"A must be [E={E}, S], got {A.shape}", dim="E")
    S = A.shape[1]
    for name, m in (("B", B), ("C", C)):
        if m.shape != (N, T, S):
            raise ShapeError(f"{name} must be {(N, T, S)}, got {m.shape}", dim=name)
    if D.shape != (E,):
        raise ShapeError(f"D must be ({E},), got {D.shape}", dim="D")
    return SelectiveScan.apply(u, delta, A, B, C, D)
