"""Reverse-mode autodiff core: a small numpy-backed Tensor with a closure tape.

Training and storage run in float32. Gradient-check tests switch the engine
to float64 via `precision("float64")` so central finite differences can be
compared at tight tolerances.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Optional

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


_STATE = {"dtype": np.float32, "grad": True}


def active_dtype():
    return _STATE["dtype"]


def grad_enabled() -> bool:
    return _STATE["grad"]


@contextmanager
def precision(dtype):
    """Temporarily switch the compute dtype ("float32" or "float64")."""
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    prev = _STATE["dtype"]
    _STATE["dtype"] = dt
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextmanager
def no_grad():
    """Disable graph recording (inference / sampling)."""
    prev = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = prev


class Tensor:
    """n-d array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        dt = _STATE["dtype"]
        if arr.dtype != dt:
            arr = arr.astype(dt)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and _STATE["grad"]
        self._backward = None
        self._parents: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # operator sugar; the implementations live in functional.py
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        return F.div(self, other)

    def __neg__(self):
        from . import functional as F

        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def __pow__(self, p):
        from . import functional as F

        return F.pow_const(self, p)


def make_result(data: np.ndarray, parents: Iterable[Tensor]) -> Tensor:
    """Build an op output wired into the tape when recording is on."""
    out = Tensor(data)
    if _STATE["grad"]:
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
    return out


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Backpropagate d(loss)/d(leaf) into every participating tensor's .grad.

    `params`, when given, is the universe of leaves: any of them not reached
    by the graph gets an explicit zero gradient. Raises DivergenceError if
    the loss or any leaf gradient is non-finite.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise DivergenceError("loss is not finite")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()

    for node in topo:
        if node.requires_grad and not node._parents:
            if node.grad is not None and not np.isfinite(node.grad).all():
                raise DivergenceError("non-finite gradient encountered")

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            elif not np.isfinite(p.grad).all():
                raise DivergenceError("non-finite gradient encountered")
