"""Reference numeric primitives.

These are the plain-numpy definitions of the operations the model is built
from. They are dtype-preserving and deliberately unoptimized: the float64
versions double as oracles for the fused float32 kernels in
:mod:`nbalign.kernels` and for finite-difference gradient checking.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractViolation, NumericError
from .rng import RngState


def layer_norm(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Normalize the last axis to zero mean and unit population variance.

    ``y = gain * (x - mean) / sqrt(var + eps) + bias`` where ``var`` is the
    biased (population) variance. ``eps`` may be zero when the input is
    guaranteed non-constant.
    """
    y, _, _ = layer_norm_fwd(x, gain, bias, eps)
    return y


def layer_norm_fwd(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    eps: float = 1e-5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Layer norm returning ``(y, xhat, inv_std)`` for use in backward."""
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ContractViolation(
            f"layer_norm gain/bias must have shape ({n},), "
            f"got {gain.shape} and {bias.shape}"
        )
    if eps < 0:
        raise ContractViolation(f"layer_norm eps must be >= 0, got {eps}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    return gain * xhat + bias, xhat, inv_std


def layer_norm_vjp(
    dy: np.ndarray,
    xhat: np.ndarray,
    inv_std: np.ndarray,
    gain: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of :func:`layer_norm_fwd`: returns ``(dx, dgain, dbias)``.

    Uses the standard reduction: with ``g = dy * gain``,
    ``dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))``.
    """
    n = xhat.shape[-1]
    g = dy * gain
    mean_g = g.mean(axis=-1, keepdims=True)
    mean_gx = np.mean(g * xhat, axis=-1, keepdims=True)
    dx = inv_std * (g - mean_g - xhat * mean_gx)
    axes = tuple(range(xhat.ndim - 1))
    dgain = np.sum(dy * xhat, axis=axes)
    dbias = np.sum(dy, axis=axes)
    return dx, dgain, dbias


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtracted)."""
    x = np.asarray(x)
    if x.size and not np.isfinite(x).all():
        raise NumericError("softmax_rows input contains non-finite entries")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Backward of row softmax: ``ds = p * (dp - sum(dp * p, axis=-1))``."""
    inner = np.sum(dp * p, axis=-1, keepdims=True)
    return p * (dp - inner)


def dropout_mask(
    shape: tuple[int, ...],
    p: float,
    rng: np.random.Generator,
    dtype: np.dtype,
) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).

    Uniform draws happen in float64 regardless of ``dtype`` so that the
    float32 and float64 paths consume the stream identically.
    """
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout p must be in [0, 1), got {p}")
    u = rng.random(shape)
    scale = 1.0 / (1.0 - p)
    return (u >= p).astype(dtype) * np.asarray(scale, dtype=dtype)


def dropout_apply(
    x: np.ndarray,
    p: float,
    rng: RngState | np.random.Generator | None,
    mode: str = "eval",
) -> np.ndarray:
    """Apply inverted dropout. Identity (bitwise) when mode is eval or p == 0.

    With p == 0 in train mode no random numbers are drawn, so the dropout
    stream is left untouched (train with p == 0 equals eval exactly).
    """
    x = np.asarray(x)
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout p must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout in train mode requires an rng")
    gen = rng.stream("dropout") if hasattr(rng, "stream") else rng
    return x * dropout_mask(x.shape, p, gen, x.dtype)


def rel_err(a, b) -> np.ndarray:
    """Elementwise relative error with an absolute floor of 1e-8."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` must be float64; the returned array has the same shape. Raises
    NumericError naming the coordinate if ``f`` produces a non-finite value.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise ContractViolation(
            f"finite_diff_grad requires float64 input, got {x.dtype}"
        )
    if h <= 0:
        raise ContractViolation(f"finite_diff_grad step must be > 0, got {h}")
    grad = np.empty_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(
                f"finite_diff_grad: non-finite objective at coordinate {i}"
            )
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
