"""Deterministic tensor engine: autodiff, Adam, seeded streams, weight codec."""

from . import functional, layers
from .codec import CodecError, decode_weights, encode_weights, expected_stream_length
from .engine import DivergenceError, Tensor, backward, no_grad, precision
from .optim import AdamState, adam_step
from .params import ParamTree
from .rng import RngStream, rng_gaussian

__all__ = [
    "AdamState",
    "CodecError",
    "DivergenceError",
    "ParamTree",
    "RngStream",
    "Tensor",
    "adam_step",
    "backward",
    "decode_weights",
    "encode_weights",
    "expected_stream_length",
    "functional",
    "layers",
    "no_grad",
    "precision",
    "rng_gaussian",
]
