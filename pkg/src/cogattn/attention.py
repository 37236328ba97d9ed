"""Softmax and signed-exponential attention kernels, forward and backward.

Score tensors carry masked positions as -inf. All kernels work on the last
two axes, so a (heads, n, n) or (batch, heads, n, n) stack is handled the
same way as a single n x n matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from cogattn.layers import rope_angles, rope_backward, _rotate
from cogattn.numerics import MASKED, DimensionError, causal_mask, rowwise


class AttnActivation(str, Enum):
    SOFTMAX = "softmax"
    COG = "cog"


@dataclass(frozen=True)
class AttentionWeights:
    a: np.ndarray
    activation: AttnActivation
    # True for rows whose unmasked scores were all exactly zero (cog only)
    degenerate: np.ndarray

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())


def qk_scores(q: np.ndarray, k: np.ndarray, scale: float | None = None) -> np.ndarray:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    if scale <= 0:
        raise ValueError("scale must be positive")
    return (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale)


def softmax_rows(p_masked: np.ndarray) -> AttentionWeights:
    m = rowwise(p_masked, "max").values
    e = np.exp(p_masked - m)
    a = e / e.sum(axis=-1, keepdims=True)
    return AttentionWeights(a, AttnActivation.SOFTMAX, np.zeros(a.shape[:-1], dtype=bool))


def cog_rows_naive(p_masked: np.ndarray, shift: bool = True) -> AttentionWeights:
    """Literal signed-exponential normalisation, one step per term.

    With ``shift=False`` the max-abs subtraction is skipped; only useful for
    checking that the shift does not change the result.
    """
    live = p_masked != MASKED
    p = np.where(live, p_masked, 0)
    s = np.sign(p)
    m = rowwise(p_masked, "abs_max").values if shift else np.zeros_like(p[..., :1])
    e = s * np.exp(s * p - m)
    red = rowwise(np.where(live, e, MASKED), "abs_sum")
    degenerate = red.values == 0
    a = e / np.where(degenerate, 1, red.values)
    return AttentionWeights(a, AttnActivation.COG, degenerate[..., 0])


def cog_rows_fast(p_masked: np.ndarray) -> AttentionWeights:
    """sign(p) times a softmax over |p|, with zero scores dropped from the softmax."""
    live = (p_masked != MASKED) & (p_masked != 0)
    abs_p = np.where(live, np.abs(p_masked), MASKED)
    m = abs_p.max(axis=-1, keepdims=True)
    degenerate = m == MASKED
    w = np.exp(abs_p - np.where(degenerate, 0, m))
    total = w.sum(axis=-1, keepdims=True)
    w = w / np.where(degenerate, 1, total)
    a = np.sign(np.where(live, p_masked, 0)) * w
    return AttentionWeights(a, AttnActivation.COG, degenerate[..., 0])


def activate(p_masked: np.ndarray, activation: AttnActivation | str) -> AttentionWeights:
    if AttnActivation(activation) is AttnActivation.SOFTMAX:
        return softmax_rows(p_masked)
    return cog_rows_fast(p_masked)


def attn_output(a: AttentionWeights | np.ndarray, v: np.ndarray) -> np.ndarray:
    w = a.a if isinstance(a, AttentionWeights) else a
    if w.shape[-1] != v.shape[-2]:
        raise DimensionError(f"weights {w.shape} do not match values {v.shape}")
    return w @ v


def cog_backward(p_row: np.ndarray, a_row: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product for the cog activation.

    The Jacobian is diag(|a|) - a a^T on live entries; the sign pattern and
    the max-abs shift are held constant. Masked and zero-score entries get
    zero gradient.
    """
    live = (p_row != MASKED) & (p_row != 0)
    a = np.where(live, a_row, 0)
    g = np.where(live, grad_a, 0)
    return np.abs(a) * g - a * (a * g).sum(axis=-1, keepdims=True)


def softmax_backward(a_row: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    return a_row * (grad_a - (a_row * grad_a).sum(axis=-1, keepdims=True))


def _weights_backward(a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    # covers both activations: |a| == a for softmax, and a is already 0 on
    # masked / zero-score entries for cog
    return np.abs(a) * grad_a - a * (a * grad_a).sum(axis=-1, keepdims=True)


@dataclass
class HeadParams:
    """Projection matrices for one attention block, laid out as x @ W."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    def check(self, d_model: int) -> None:
        if d_model % self.n_heads:
            raise DimensionError(f"d_model {d_model} not divisible by {self.n_heads} heads")
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d_model, d_model):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, want {(d_model, d_model)}")
        if self.w_o.shape != (d_model, d_model):
            raise DimensionError(f"w_o has shape {self.w_o.shape}, want {(d_model, d_model)}")


def _split(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def attention_forward(
    x: np.ndarray,
    params: HeadParams,
    activation: AttnActivation | str,
    rope_base: float = 10000.0,
    qk_scale: bool = True,
):
    """Causal multi-head attention over a (batch, n, d_model) input.

    Returns ``(out, weights, cache)``; ``weights`` is the per-head
    AttentionWeights stack of shape (batch, heads, n, n).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    _, n, d = x.shape
    params.check(d)
    h = params.n_heads
    dh = d // h
    cos, sin = rope_angles(n, dh, rope_base, x.dtype)
    q = _rotate(_split(x @ params.w_q, h), cos, sin)
    k = _rotate(_split(x @ params.w_k, h), cos, sin)
    v = _split(x @ params.w_v, h)
    scale = 1.0 / math.sqrt(dh) if qk_scale else 1.0
    p = qk_scores(q, k, scale)
    p = np.where(causal_mask(n), x.dtype.type(MASKED), p)
    weights = activate(p, activation)
    o = _merge(weights.a @ v)
    out = o @ params.w_o
    cache = (x, q, k, v, weights.a, o, params, scale, cos, sin, squeeze)
    if squeeze:
        out = out[0]
    return out, weights, cache


def attention_backward(grad_out: np.ndarray, cache):
    """Returns ``(dx, {"w_q": .., "w_k": .., "w_v": .., "w_o": ..})``."""
    x, q, k, v, a, o, params, scale, cos, sin, squeeze = cache
    if squeeze:
        grad_out = grad_out[None]
    d = x.shape[-1]
    h = params.n_heads
    x2 = x.reshape(-1, d)
    dw_o = o.reshape(-1, d).T @ grad_out.reshape(-1, d)
    do = _split(grad_out @ params.w_o.T, h)
    da = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ do
    dp = _weights_backward(a, da) * x.dtype.type(scale)
    dq = _merge(rope_backward(dp @ k, cos, sin))
    dk = _merge(rope_backward(np.swapaxes(dp, -1, -2) @ q, cos, sin))
    dv = _merge(dv)
    grads = {
        "w_q": x2.T @ dq.reshape(-1, d),
        "w_k": x2.T @ dk.reshape(-1, d),
        "w_v": x2.T @ dv.reshape(-1, d),
        "w_o": dw_o,
    }
    dx = dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T
    if squeeze:
        dx = dx[0]
    return dx, grads


def multihead_block(
    x: np.ndarray,
    params: HeadParams,
    activation: AttnActivation | str,
    rope_base: float = 10000.0,
    qk_scale: bool = True,
    capture: bool = False,
):
    """Single-sequence attention block on an (n, d_model) input.

    With ``capture=True`` returns ``(out, weights)`` where ``weights.a`` has
    shape (heads, n, n) and is a fresh copy.
    """
    if x.ndim != 2:
        raise DimensionError(f"expected (n, d_model), got {x.shape}")
    out, weights, _ = attention_forward(x, params, activation, rope_base, qk_scale)
    if not capture:
        return out
    return out, AttentionWeights(weights.a[0].copy(), weights.activation, weights.degenerate[0].copy())
