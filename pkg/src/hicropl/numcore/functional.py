"""Fused neural primitives with hand-written local gradients."""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from ..errors import DegenerateVectorError, DimensionError, NumericError
from .tensor import Tensor, as_tensor, matmul, unbroadcast

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Max-stabilized softmax of ``x / temperature`` along ``axis``."""
    x = as_tensor(x)
    if not temperature > 0:
        raise NumericError(f"softmax temperature must be positive, got {temperature}")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = x.data / temperature
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / temperature,)

    return Tensor._from_op(y, (x,), bw)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not temperature > 0:
        raise NumericError(f"softmax temperature must be positive, got {temperature}")
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    z = x.data / temperature
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._from_op(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} vs gain {gain.shape}, bias {bias.shape}")
    if not eps > 0:
        raise NumericError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._from_op(out, (x, gain, bias), bw)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return Tensor._from_op(xd * cdf, (x,), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(y, (x,), bw)


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``u`` and ``v`` along ``axis`` (broadcasting)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine_similarity width mismatch: {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    uu = (ud * ud).sum(axis=axis, keepdims=True)
    vv = (vd * vd).sum(axis=axis, keepdims=True)
    if (uu == 0).any() or (vv == 0).any():
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    # a single square root of the product makes cos(x, x) and cos(-x, x) exactly +-1
    denom = np.sqrt(uu * vv)
    c = np.clip((ud * vd).sum(axis=axis, keepdims=True) / denom, -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis)
        gu = unbroadcast(g * (vd / denom - c * ud / uu), u.shape) if u.requires_grad else None
        gv = unbroadcast(g * (ud / denom - c * vd / vv), v.shape) if v.requires_grad else None
        return gu, gv

    return Tensor._from_op(np.squeeze(c, axis=axis), (u, v), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def dot(u, v) -> Tensor:
    return (as_tensor(u) * as_tensor(v)).sum()
