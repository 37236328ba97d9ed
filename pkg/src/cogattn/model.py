"""Toy decoder-only transformer with a per-layer choice of attention activation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from cogattn.attention import (
    AttentionWeights,
    AttnActivation,
    HeadParams,
    attention_backward,
    attention_forward,
)
from cogattn.layers import (
    rms_norm,
    rms_norm_backward,
    rms_norm_forward,
    rope_apply,
    swiglu_backward,
    swiglu_ffn,
    swiglu_forward,
)
from cogattn.numerics import Precision, Rng, randn

__all__ = [
    "ActivationPolicy",
    "Cogformer",
    "ForwardResult",
    "ModelConfig",
    "cross_entropy",
    "forward",
    "init_params",
    "layer_activation",
    "loss_and_grads",
    "param_count",
    "rms_norm",
    "rope_apply",
    "swiglu_ffn",
]


class ActivationPolicy(str, Enum):
    ALL_SOFTMAX = "all_softmax"
    ALL_COG = "all_cog"
    COG_EXCEPT_FIRST = "cog_except_first"
    COG_EXCEPT_FIRST_AND_LAST = "cog_except_first_and_last"


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 256
    context_len: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    activation_policy: ActivationPolicy = ActivationPolicy.COG_EXCEPT_FIRST_AND_LAST
    qk_scale_enabled: bool = True
    precision: Precision = Precision.SINGLE
    seed: int = 0

    def __post_init__(self):
        self.activation_policy = ActivationPolicy(self.activation_policy)
        self.precision = Precision(self.precision)
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "context_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary embeddings")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.norm_eps < 0:
            raise ValueError("norm_eps must be non-negative")

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation_policy"] = self.activation_policy.value
        d["precision"] = self.precision.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def layer_activation(layer_idx: int, config: ModelConfig) -> AttnActivation:
    if not 0 <= layer_idx < config.n_layers:
        raise IndexError(f"layer {layer_idx} out of range for {config.n_layers} layers")
    policy = config.activation_policy
    if policy is ActivationPolicy.ALL_SOFTMAX:
        return AttnActivation.SOFTMAX
    if policy is ActivationPolicy.ALL_COG:
        return AttnActivation.COG
    if layer_idx == 0:
        return AttnActivation.SOFTMAX
    if policy is ActivationPolicy.COG_EXCEPT_FIRST_AND_LAST and layer_idx == config.n_layers - 1:
        return AttnActivation.SOFTMAX
    return AttnActivation.COG


LAYER_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down")


@dataclass
class Cogformer:
    config: ModelConfig
    params: dict[str, np.ndarray]
    tie_embeddings: bool = False

    def head_params(self, layer: int) -> HeadParams:
        p = self.params
        pre = f"layers.{layer}."
        return HeadParams(p[pre + "w_q"], p[pre + "w_k"], p[pre + "w_v"], p[pre + "w_o"], self.config.n_heads)

    def unembedding(self) -> np.ndarray:
        if self.tie_embeddings:
            return self.params["tok_emb"].T
        return self.params["unembed"]

    def copy(self) -> "Cogformer":
        return Cogformer(self.config, {k: v.copy() for k, v in self.params.items()}, self.tie_embeddings)


def param_shapes(config: ModelConfig, tie_embeddings: bool = False) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        shapes[pre + "attn_norm"] = (d,)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            shapes[pre + name] = (d, d)
        shapes[pre + "ffn_norm"] = (d,)
        shapes[pre + "w_gate"] = (d, f)
        shapes[pre + "w_up"] = (d, f)
        shapes[pre + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    if not tie_embeddings:
        shapes["unembed"] = (d, v)
    return shapes


def param_count(config: ModelConfig, tie_embeddings: bool = False) -> int:
    d, f, v, n = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return v * d + n * per_layer + d + (0 if tie_embeddings else d * v)


def init_params(config: ModelConfig, tie_embeddings: bool = False) -> Cogformer:
    """Normal(0, 0.02) weights, residual output projections shrunk by 1/sqrt(2 L), unit gains.

    Each tensor draws from its own RNG substream keyed by name, so the
    result does not depend on construction order.
    """
    root = Rng(config.seed)
    out_std = 0.02 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config, tie_embeddings).items():
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=config.dtype)
        else:
            std = out_std if name.endswith(("w_o", "w_down")) else 0.02
            params[name] = randn(root.substream(name), shape, std, config.precision)
    return Cogformer(config, params, tie_embeddings)


@dataclass
class ForwardResult:
    logits: np.ndarray
    hidden: list[np.ndarray] = field(default_factory=list)
    attention: list[AttentionWeights] = field(default_factory=list)
    final: np.ndarray | None = None
    prenorm_final: np.ndarray | None = None


CAPTURE_KEYS = frozenset({"hidden", "attention", "final", "prenorm_final"})


def _check_tokens(model: Cogformer, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2):
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    n = tokens.shape[-1]
    if n == 0:
        raise ValueError("empty token sequence")
    if n > model.config.context_len:
        raise ValueError(f"sequence length {n} exceeds context_len {model.config.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ValueError(f"token id out of vocabulary range [0, {model.config.vocab_size})")
    return tokens


def _run(model: Cogformer, tokens: np.ndarray, capture=frozenset(), ablate=frozenset(), keep_cache=False):
    cfg = model.config
    p = model.params
    squeeze = tokens.ndim == 1
    tok = tokens[None] if squeeze else tokens
    x = p["tok_emb"][tok]
    result = ForwardResult(logits=None)
    caches = []

    def grab(t):
        return t[0].copy() if squeeze else t.copy()

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        act = layer_activation(i, cfg)
        h, norm1 = rms_norm_forward(x, p[pre + "attn_norm"], cfg.norm_eps)
        a_out, weights, attn_cache = attention_forward(
            h, model.head_params(i), act, cfg.rope_base, cfg.qk_scale_enabled
        )
        if "attn" in ablate:
            a_out = np.zeros_like(a_out)
        x = x + a_out
        h2, norm2 = rms_norm_forward(x, p[pre + "ffn_norm"], cfg.norm_eps)
        f_out, ffn_cache = swiglu_forward(h2, p[pre + "w_gate"], p[pre + "w_up"], p[pre + "w_down"])
        if "ffn" in ablate:
            f_out = np.zeros_like(f_out)
        x = x + f_out
        if keep_cache:
            caches.append((norm1, attn_cache, norm2, ffn_cache))
        if "hidden" in capture:
            result.hidden.append(grab(x))
        if "attention" in capture:
            a = weights.a[0] if squeeze else weights.a
            deg = weights.degenerate[0] if squeeze else weights.degenerate
            result.attention.append(AttentionWeights(a.copy(), weights.activation, deg.copy()))
    if "prenorm_final" in capture:
        result.prenorm_final = grab(x)
    hf, norm_f = rms_norm_forward(x, p["final_norm"], cfg.norm_eps)
    if "final" in capture:
        result.final = grab(hf)
    logits = hf @ model.unembedding()
    result.logits = logits[0] if squeeze else logits
    return result, (tok, caches, norm_f, hf)


def forward(model: Cogformer, tokens, capture=(), ablate=()) -> ForwardResult:
    """Run the model on a token sequence (n,) or batch (B, n).

    ``capture`` may include ``hidden`` (residual stream after every layer),
    ``attention`` (per-layer AttentionWeights), ``final`` (final-norm output)
    and ``prenorm_final``. ``ablate`` may include ``attn`` and/or ``ffn`` to
    zero those sublayer outputs. Captured arrays are copies.
    """
    capture = frozenset(capture)
    unknown = capture - CAPTURE_KEYS
    if unknown:
        raise ValueError(f"unknown capture keys {sorted(unknown)}")
    tokens = _check_tokens(model, tokens)
    result, _ = _run(model, tokens, capture, frozenset(ablate))
    return result


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets) -> float:
    """Mean next-token NLL in nats.

    ``targets`` is the input sequence itself; position t is scored on
    ``targets[t + 1]``, so an n-token sequence yields n - 1 terms.
    """
    return _cross_entropy(logits, targets)[0]


def _cross_entropy(logits: np.ndarray, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of vocabulary range [0, {vocab})")
    if targets.shape[-1] < 2:
        raise ValueError("need at least two tokens to form a next-token target")
    lp = _log_softmax(logits[..., :-1, :])
    nxt = targets[..., 1:]
    picked = np.take_along_axis(lp, nxt[..., None], axis=-1)[..., 0]
    count = nxt.size
    loss = float(-picked.sum(dtype=np.float64) / count)
    return loss, lp, nxt, count


def loss_and_grads(model: Cogformer, tokens) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy on ``tokens`` and its gradient for every parameter."""
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    p = model.params
    result, (tok, caches, norm_f, hf) = _run(model, tokens, keep_cache=True)
    logits = result.logits if tokens.ndim == 2 else result.logits[None]
    loss, lp, nxt, count = _cross_entropy(logits, tok)

    dlogits = np.zeros_like(logits)
    probs = np.exp(lp)
    np.put_along_axis(probs, nxt[..., None], np.take_along_axis(probs, nxt[..., None], axis=-1) - 1, axis=-1)
    dlogits[..., :-1, :] = probs / count

    grads: dict[str, np.ndarray] = {}
    d = cfg.d_model
    w_un = model.unembedding()
    d_un = hf.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    dx = dlogits @ w_un.T
    dx, grads["final_norm"] = rms_norm_backward(dx, norm_f)

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        norm1, attn_cache, norm2, ffn_cache = caches[i]
        dh2, gg, gu, gd = swiglu_backward(dx, ffn_cache)
        grads[pre + "w_gate"], grads[pre + "w_up"], grads[pre + "w_down"] = gg, gu, gd
        dn, grads[pre + "ffn_norm"] = rms_norm_backward(dh2, norm2)
        dx = dx + dn
        dh, attn_grads = attention_backward(dx, attn_cache)
        for name, g in attn_grads.items():
            grads[pre + name] = g
        dn, grads[pre + "attn_norm"] = rms_norm_backward(dh, norm1)
        dx = dx + dn

    d_emb = np.zeros_like(p["tok_emb"])
    np.add.at(d_emb, tok.reshape(-1), dx.reshape(-1, d))
    if model.tie_embeddings:
        d_emb += d_un.T
    else:
        grads["unembed"] = d_un
    grads["tok_emb"] = d_emb
    grads = {k: grads[k].astype(p[k].dtype, copy=False) for k in p}
    return loss, grads
