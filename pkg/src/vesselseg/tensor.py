"""Dense tensors with a reverse-mode tape.

Every primitive is a :class:`Function` subclass. Calling ``Fn.apply`` runs the
numpy forward and, when any input requires a gradient, links the result to the
function node so :func:`backward` can walk the graph in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterable, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand extents do not satisfy an operation's contract."""

    def __init__(self, message: str, dim: str | int | None = None):
        super().__init__(message)
        self.dim = dim


class DomainError(ValueError):
    """Raised when an input lies outside an operation's mathematical domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None and np.dtype(dtype) not in DTYPES:
            raise TypeError(f"tensor dtype must be float32 or float64, got {np.dtype(dtype)}")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Function | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, seed: np.ndarray | "Tensor" | None = None) -> dict["Tensor", np.ndarray]:
        return backward(self, seed)

    # -- operator sugar (scalar-or-same-shape only) -----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.negate(self)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


class Function:
    """A primitive on the tape.

    Subclasses implement ``forward(*arrays, **kwargs) -> ndarray`` and
    ``backward(grad) -> tuple`` with one entry per tensor input (``None`` where
    no gradient flows). Arrays needed by backward go on ``self``.
    """

    inputs: tuple[Tensor, ...] = ()
    needs_input_grad: tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    def release(self) -> None:
        self.__dict__.clear()

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        needs = _grad_enabled and any(t.requires_grad for t in tensors)
        fn.needs_input_grad = tuple(needs and t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        result = Tensor(out, requires_grad=needs, dtype=out.dtype)
        if needs:
            fn.inputs = tensors
            result._node = fn
        else:
            fn.release()
        return result


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(output: Tensor, seed: np.ndarray | Tensor | None = None,
             retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Propagate ``seed`` from ``output`` to every leaf that requires a gradient.

    Leaf gradients accumulate into ``leaf.grad`` (summed over fan-out and over
    repeated calls) and are also returned as a ``{leaf: grad}`` map holding the
    contribution of this call. The graph is consumed unless ``retain_graph``.
    """
    if seed is None:
        seed_arr = np.ones(output.shape, dtype=output.dtype)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ShapeError(f"seed shape {seed_arr.shape} != output shape {output.shape}", dim="seed")
    if not output.requires_grad:
        return {}

    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): seed_arr}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is None:
                continue
            leaf_grads[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is not None:
            in_grads = node.backward(g)
            for parent, pg in zip(node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{type(node).__name__} produced gradient of shape "
                                     f"{pg.shape} for input of shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        if not retain_graph:
            node.release()
            t._node = None
    return leaf_grads


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
