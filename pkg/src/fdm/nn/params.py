"""ParamTree: an ordered path -> Tensor map with lexicographic iteration."""

from __future__ import annotations

from typing import Dict, Iterator, Mapping

import numpy as np

from .engine import Tensor


class ParamTree:
    """Named parameter collection. Iteration order is always lexicographic
    by path, so serialization and optimizer state stay aligned for free."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: Dict[str, Tensor] = {}
        if items:
            for path, t in items.items():
                self[path] = t

    def __setitem__(self, path: str, t: Tensor) -> None:
        if not isinstance(path, str) or not path:
            raise ValueError("parameter path must be a non-empty string")
        if not isinstance(t, Tensor):
            raise TypeError(f"parameter {path!r} must be a Tensor")
        self._items[path] = t

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __contains__(self, path: str) -> bool:
        return path in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def paths(self) -> list[str]:
        return sorted(self._items)

    def items(self):
        for path in sorted(self._items):
            yield path, self._items[path]

    def tensors(self) -> list[Tensor]:
        return [self._items[p] for p in sorted(self._items)]

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()

    def copy(self) -> "ParamTree":
        out = ParamTree()
        for path, t in self.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out[path] = c
        return out

    def shapes(self) -> Dict[str, tuple]:
        return {p: tuple(t.data.shape) for p, t in self.items()}

    def load_values(self, other: "ParamTree") -> None:
        """Copy values from a structurally identical tree (e.g. a checkpoint)."""
        if self.shapes() != other.shapes():
            raise ValueError("parameter structure mismatch")
        for path, t in self.items():
            t.data[...] = other[path].data

    def allclose(self, other: "ParamTree") -> bool:
        return self.shapes() == other.shapes() and all(
            np.array_equal(t.data, other[p].data) for p, t in self.items()
        )
