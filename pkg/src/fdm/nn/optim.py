"""Adam with bias correction, keyed off ParamTree paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .params import ParamTree


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamTree, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for path, p in params.items():
            st.m[path] = np.zeros_like(p.data)
            st.v[path] = np.zeros_like(p.data)
        return st


def adam_step(params: ParamTree, grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[ParamTree, AdamState]:
    """One in-place Adam update. grads must mirror params exactly."""
    if set(grads) != set(params.paths()):
        missing = set(params.paths()) ^ set(grads)
        raise ValueError(f"gradient paths do not mirror params: {sorted(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for path, p in params.items():
        g = grads[path]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch at {path!r}")
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
