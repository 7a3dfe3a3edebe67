"""Differentiable operations over engine.Tensor.

All ops record a closure on the tape (when grad mode is on) that accumulates
into parent .grad buffers. conv2d runs as im2col + one sgemm; its input
gradient is computed with the dilate-and-correlate identity so the backward
pass reuses the same fast matmul path.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .engine import Tensor, make_result


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = make_result(a.data + b.data, (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(out.grad, b.data.shape))

        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = make_result(a.data - b.data, (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-out.grad, b.data.shape))

        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = make_result(a.data * b.data, (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(out.grad * a.data, b.data.shape))

        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = make_result(a.data / b.data, (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                g = -out.grad * a.data / (b.data * b.data)
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        out._backward = _bw
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = make_result(a.data**p, (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(out.grad * p * a.data ** (p - 1.0))

        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    out = make_result(a.data @ b.data, (a, b))
    if out.requires_grad:

        def _bw():
            if a.requires_grad:
                a.accumulate_grad(out.grad @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ out.grad)

        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = make_result(a.data.reshape(shape), (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(out.grad.reshape(a.data.shape))

        out._backward = _bw
    return out


def sum_all(a: Tensor) -> Tensor:
    out = make_result(np.asarray(a.data.sum()), (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(np.broadcast_to(out.grad, a.data.shape).copy())

        out._backward = _bw
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = make_result(np.asarray(a.data.mean()), (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(np.broadcast_to(out.grad / n, a.data.shape).copy())

        out._backward = _bw
    return out


# ---------------------------------------------------------------- activations


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = make_result(s, (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(out.grad * s * (1.0 - s))

        out._backward = _bw
    return out


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = make_result(a.data * s, (a,))
    if out.requires_grad:

        def _bw():
            a.accumulate_grad(out.grad * s * (1.0 + a.data * (1.0 - s)))

        out._backward = _bw
    return out


# ---------------------------------------------------------------- structure


def concat_channels(tensors) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    for t in tensors:
        if t.data.ndim != 4:
            raise ValueError("concat_channels expects N,C,H,W tensors")
    out = make_result(np.concatenate([t.data for t in tensors], axis=1), tensors)
    if out.requires_grad:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def _bw():
            parts = np.split(out.grad, splits, axis=1)
            for t, g in zip(tensors, parts):
                if t.requires_grad:
                    t.accumulate_grad(g)

        out._backward = _bw
    return out


def upsample_nearest2x(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim != 4:
        raise ValueError("upsample_nearest2x expects N,C,H,W")
    y = x.repeat(2, axis=2).repeat(2, axis=3)
    out = make_result(y, (a,))
    if out.requires_grad:
        n, c, h, w = x.shape

        def _bw():
            g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            a.accumulate_grad(g)

        out._backward = _bw
    return out


# ---------------------------------------------------------------- conv2d


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return (cols, out_h, out_w); cols has shape (N*oh*ow, C*kh*kw)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    cols = windows.reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _conv_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Plain cross-correlation on arrays, used by forward and input-grad."""
    cout, cin, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    y = cols @ w.reshape(cout, cin * kh * kw).T
    return y.reshape(x.shape[0], oh, ow, cout).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (Cout,Cin,kH,kW) kernels."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be N,C,H,W; got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be Cout,Cin,kH,kW; got {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, kcin, kh, kw = w.data.shape
    if kcin != cin:
        raise ValueError(
            f"kernel input channels ({kcin}) do not match input channels ({cin})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if b.data.shape != (cout,):
        raise ValueError(
            f"bias shape {b.data.shape} does not match output channels ({cout},)"
        )

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T
    y += b.data
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = make_result(y, (x, w, b))

    if out.requires_grad:

        def _bw():
            gy = out.grad  # (N, Cout, oh, ow)
            if b.requires_grad:
                b.accumulate_grad(gy.sum(axis=(0, 2, 3)))
            gmat = gy.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
            if w.requires_grad:
                gw = gmat.T @ cols
                w.accumulate_grad(gw.reshape(cout, cin, kh, kw))
            if x.requires_grad:
                # dilate gy by stride, pad to realign, correlate with the
                # spatially flipped kernel (in/out channels swapped)
                if stride > 1:
                    dil = np.zeros(
                        (n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
                        dtype=gy.dtype,
                    )
                    dil[:, :, ::stride, ::stride] = gy
                else:
                    dil = gy
                lpad = kh - 1 - padding
                rpad = h + padding - ((oh - 1) * stride + 1)
                cpad_l = kw - 1 - padding
                cpad_r = wd + padding - ((ow - 1) * stride + 1)
                dil = np.pad(
                    dil, ((0, 0), (0, 0), (lpad, rpad), (cpad_l, cpad_r))
                )
                wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                x.accumulate_grad(_conv_raw(dil, np.ascontiguousarray(wt), 1, 0))

        out._backward = _bw
    return out


# ---------------------------------------------------------------- group norm


def group_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, group_size: int = 8, eps: float = 1e-5
) -> Tensor:
    """Normalize over channel groups of `group_size` (per sample)."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    n, c, h, w = x.data.shape
    if c % group_size != 0:
        raise ValueError(f"channels ({c}) not divisible by group size {group_size}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("gamma/beta must have shape (C,)")
    g = c // group_size

    xg = x.data.reshape(n, g, group_size * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = make_result(y, (x, gamma, beta))

    if out.requires_grad:
        m = group_size * h * w

        def _bw():
            gy = out.grad
            if beta.requires_grad:
                beta.accumulate_grad(gy.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                gamma.accumulate_grad((gy * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxh = (gy * gamma.data[None, :, None, None]).reshape(n, g, m)
                xh = xhat.reshape(n, g, m)
                s1 = dxh.sum(axis=2, keepdims=True)
                s2 = (dxh * xh).sum(axis=2, keepdims=True)
                dx = inv / m * (m * dxh - s1 - xh * s2)
                x.accumulate_grad(dx.reshape(n, c, h, w))

        out._backward = _bw
    return out
