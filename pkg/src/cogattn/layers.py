"""Llama-style building blocks with explicit backward passes.

Every ``*_backward`` takes the upstream gradient plus whatever the forward
returned in its cache and hands back input and parameter gradients.
"""

from __future__ import annotations

import numpy as np


def rope_angles(n_positions: int | np.ndarray, d_head: int, base: float, dtype=np.float64):
    """cos/sin tables of shape (n, d_head // 2) for the given positions."""
    if d_head % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {d_head}")
    positions = np.arange(n_positions) if np.isscalar(n_positions) else np.asarray(n_positions)
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_apply(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive coordinate pairs of ``x`` (..., n, d_head) by position.

    Pair ``i`` at position ``m`` turns by ``m * base ** (-2i / d_head)``.
    """
    cos, sin = rope_angles(positions, x.shape[-1], base, x.dtype)
    return _rotate(x, cos, sin)


def rope_backward(grad: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # transpose of a rotation is the rotation by the negated angle
    return _rotate(grad, cos, -sin)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return rms_norm_forward(x, gain, eps)[0]


def rms_norm_forward(x: np.ndarray, gain: np.ndarray, eps: float):
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    inv = np.where(np.isfinite(inv), inv, 0).astype(x.dtype)
    xhat = x * inv
    return xhat * gain, (xhat, inv, gain)


def rms_norm_backward(grad: np.ndarray, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = (grad * xhat).reshape(-1, d).sum(axis=0)
    u = grad * gain
    dx = inv * (u - xhat * np.mean(u * xhat, axis=-1, keepdims=True))
    return dx, dgain


def silu(t: np.ndarray) -> np.ndarray:
    return t * _sigmoid(t)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = t.dtype.type(0.5)
    return half * (1 + np.tanh(half * t))


def swiglu_ffn(x, w_gate, w_up, w_down):
    return swiglu_forward(x, w_gate, w_up, w_down)[0]


def swiglu_forward(x, w_gate, w_up, w_down):
    if x.shape[-1] != w_gate.shape[0] or w_gate.shape != w_up.shape or w_down.shape[0] != w_gate.shape[1]:
        raise ValueError(
            f"swiglu shape mismatch: x {x.shape}, gate {w_gate.shape}, up {w_up.shape}, down {w_down.shape}"
        )
    g = x @ w_gate
    u = x @ w_up
    sig = _sigmoid(g)
    act = g * sig
    h = act * u
    return h @ w_down, (x, g, u, sig, act, h, w_gate, w_up, w_down)


def swiglu_backward(grad, cache):
    x, g, u, sig, act, h, w_gate, w_up, w_down = cache
    d = x.shape[-1]
    f = h.shape[-1]
    dw_down = h.reshape(-1, f).T @ grad.reshape(-1, grad.shape[-1])
    dh = grad @ w_down.T
    du = dh * act
    dg = dh * u * (sig * (1 + g * (1 - sig)))
    x2 = x.reshape(-1, d)
    dw_gate = x2.T @ dg.reshape(-1, f)
    dw_up = x2.T @ du.reshape(-1, f)
    dx = dg @ w_gate.T + du @ w_up.T
    return dx, dw_gate, dw_up, dw_down
