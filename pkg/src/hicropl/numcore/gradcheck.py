"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor, backward

# Coordinates whose analytic and numeric gradients are both below this are
# compared in absolute rather than relative terms.
ABS_FLOOR = 1e-6


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    val = float(out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError("function is non-finite at a probe point")
    return val


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` takes no arguments and must read ``inputs`` (leaf tensors with
    ``requires_grad``) by closure. When ``max_coords`` is set, that many
    coordinates per input are probed, chosen with ``seed``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for t in inputs:
        t.grad = None
    out = f()
    _scalar(out)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or max_coords >= n else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = _scalar(f())
            flat[c] = orig - eps
            fm = _scalar(f())
            flat[c] = orig
            num[j] = (fp - fm) / (2.0 * eps)
        if len(coords):
            worst = max(worst, float(relative_error(a.reshape(-1)[coords], num).max()))
    for t in inputs:
        t.grad = None
    return worst
