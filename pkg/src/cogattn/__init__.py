"""Signed-exponential ("cog") attention kernels and a toy decoder-only model."""

from cogattn.attention import (
    AttentionWeights,
    AttnActivation,
    cog_backward,
    cog_rows_fast,
    cog_rows_naive,
    softmax_backward,
    softmax_rows,
)
from cogattn.model import ActivationPolicy, Cogformer, ModelConfig, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "ActivationPolicy",
    "AttentionWeights",
    "AttnActivation",
    "Cogformer",
    "ModelConfig",
    "cog_backward",
    "cog_rows_fast",
    "cog_rows_naive",
    "forward",
    "init_params",
    "softmax_backward",
    "softmax_rows",
]
