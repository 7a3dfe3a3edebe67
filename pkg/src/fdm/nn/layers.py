"""Parameter registration and apply helpers for conv / linear / group-norm.

Conv kernels use Kaiming-uniform fan-in init; biases start at zero; group
norm starts as identity. Registration with stream=None creates zero-filled
placeholders, which is how net specs derive their shape tables (and hence
architecture hashes) without touching an RNG.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .engine import Tensor
from .params import ParamTree
from .rng import RngStream

GN_GROUP_SIZE = 8


def _kaiming_uniform(shape, fan_in: int, stream: RngStream | None) -> np.ndarray:
    if stream is None:
        return np.zeros(shape, dtype=np.float32)
    bound = float(np.sqrt(6.0 / fan_in))
    return stream.uniform(-bound, bound, shape)


def add_conv(tree: ParamTree, path: str, cin: int, cout: int, k: int = 3,
             stream: RngStream | None = None) -> None:
    w = _kaiming_uniform((cout, cin, k, k), cin * k * k, stream)
    tree[f"{path}.weight"] = Tensor(w, requires_grad=True)
    tree[f"{path}.bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)


def add_linear(tree: ParamTree, path: str, din: int, dout: int,
               stream: RngStream | None = None) -> None:
    w = _kaiming_uniform((din, dout), din, stream)
    tree[f"{path}.weight"] = Tensor(w, requires_grad=True)
    tree[f"{path}.bias"] = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)


def add_group_norm(tree: ParamTree, path: str, channels: int) -> None:
    tree[f"{path}.gamma"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
    tree[f"{path}.beta"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)


def conv(tree: ParamTree, path: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    return F.conv2d(x, tree[f"{path}.weight"], tree[f"{path}.bias"], stride, padding)


def linear(tree: ParamTree, path: str, x: Tensor) -> Tensor:
    return F.add(F.matmul(x, tree[f"{path}.weight"]), tree[f"{path}.bias"])


def group_norm(tree: ParamTree, path: str, x: Tensor) -> Tensor:
    return F.group_norm(x, tree[f"{path}.gamma"], tree[f"{path}.beta"], GN_GROUP_SIZE)


def conv_gn_silu(tree: ParamTree, path: str, x: Tensor, stride: int = 1,
                 bias: Tensor | None = None) -> Tensor:
    """conv -> group norm -> (optional channel bias) -> SiLU.

    The bias hook carries the diffusion net's time embedding; it is applied
    after normalization so the shift survives into the activation.
    """
    h = conv(tree, f"{path}.conv", x, stride=stride, padding=1)
    h = group_norm(tree, f"{path}.gn", h)
    if bias is not None:
        h = F.add(h, bias)
    return F.silu(h)


def add_conv_gn(tree: ParamTree, path: str, cin: int, cout: int,
                stream: RngStream | None = None) -> None:
    add_conv(tree, f"{path}.conv", cin, cout, 3, stream)
    add_group_norm(tree, f"{path}.gn", cout)
