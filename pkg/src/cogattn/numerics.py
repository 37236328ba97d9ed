"""Small tensor substrate on top of numpy.

Tensors are plain ``numpy.ndarray`` values in float32 ("single") or float64
("double"). The helpers here pin down the few behaviours the rest of the
package relies on: a -inf masking sentinel that absolute-value reductions
skip, ``sign(0) == 0``, and a counter-based RNG with explicit substreams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

MASKED = -np.inf


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)

    @classmethod
    def of(cls, x: np.ndarray) -> "Precision":
        if x.dtype == np.float32:
            return cls.SINGLE
        if x.dtype == np.float64:
            return cls.DOUBLE
        raise TypeError(f"unsupported dtype {x.dtype}")


class DimensionError(ValueError):
    pass


def tensor(data, precision: Precision | str = Precision.DOUBLE) -> np.ndarray:
    return np.array(data, dtype=Precision(precision).dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n).

    Leading batch dimensions are allowed and must match exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


class RowReduction(NamedTuple):
    values: np.ndarray
    degenerate: np.ndarray


def rowwise(x: np.ndarray, reduce: str) -> RowReduction:
    """Reduce each row of a 2-D (or batched) tensor to a column.

    ``reduce`` is one of ``max``, ``sum``, ``abs_max``, ``abs_sum``. The
    ``abs_*`` variants skip masked (-inf) entries. Rows with nothing left to
    reduce are flagged in ``degenerate`` and reduce to 0.
    """
    if x.ndim < 2:
        raise DimensionError(f"rowwise needs a 2-D tensor, got shape {x.shape}")
    live = x != MASKED
    degenerate = ~live.any(axis=-1, keepdims=True)
    if reduce == "max":
        values = x.max(axis=-1, keepdims=True)
    elif reduce == "sum":
        values = np.where(live, x, 0).sum(axis=-1, keepdims=True)
    elif reduce == "abs_max":
        values = np.where(live, np.abs(x), 0).max(axis=-1, keepdims=True)
    elif reduce == "abs_sum":
        values = np.where(live, np.abs(x), 0).sum(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    values = np.where(degenerate, 0, values).astype(x.dtype, copy=False)
    return RowReduction(values, degenerate)


def elementwise(x: np.ndarray, f: str, c: float | None = None) -> np.ndarray:
    """Apply one of ``exp``, ``sign``, ``abs``, ``neg``, ``scale`` elementwise."""
    if f == "exp":
        return np.exp(x)
    if f == "sign":
        return np.sign(x)
    if f == "abs":
        return np.abs(x)
    if f == "neg":
        return -x
    if f == "scale":
        if c is None:
            raise ValueError("scale needs a constant")
        return x * x.dtype.type(c)
    raise ValueError(f"unknown map {f!r}")


def causal_mask(n: int) -> np.ndarray:
    """Boolean n x n matrix, True where column > row (future positions)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def apply_causal_mask(p: np.ndarray) -> np.ndarray:
    n = p.shape[-1]
    if p.ndim < 2 or p.shape[-2] != n:
        raise DimensionError(f"causal mask needs square trailing dims, got {p.shape}")
    return np.where(causal_mask(n), p.dtype.type(MASKED), p)


@dataclass(frozen=True)
class Rng:
    """Counter-based generator (Philox) keyed by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        mask = (1 << 64) - 1
        key = np.array([self.seed & mask, self.stream & mask], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def substream(self, name: str | int) -> "Rng":
        if isinstance(name, str):
            name = zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, (self.stream * 1_000_003 + name + 1) & ((1 << 64) - 1))


def randn(rng: Rng, shape, std: float, precision: Precision | str = Precision.DOUBLE) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    dtype = Precision(precision).dtype
    draws = rng.generator().standard_normal(size=shape, dtype=np.float64)
    return (draws * std).astype(dtype)
