"""Read-only measurements on a trained model.

Representational-collapse probes, per-head attention statistics, OV-circuit
eigenvalue positivity, a training-step timing comparison and PPM export of
attention maps.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from cogattn.model import ActivationPolicy, Cogformer, ModelConfig, forward, init_params, loss_and_grads
from cogattn.training import OptimState, TrainConfig, adamw_step, clip_grad_norm, tokenize_bytes

ONE = ord("1")
ZERO = ord("0")
FULL_SCALE_N_LIST = (200, 400, 600, 800, 1000, 2000)


class ProbeError(ValueError):
    pass


class ProbeTask(str, Enum):
    FINDING_ZERO = "finding_zero"
    COUNTING_ONES = "counting_ones"


def build_task_pair(task: ProbeTask | str, n: int, context_len: int | None = None):
    """Two byte-token sequences that differ minimally.

    finding_zero: n+1 ones vs. a zero followed by n ones.
    counting_ones: n ones vs. n+1 ones (our own reconstruction of the task).
    """
    task = ProbeTask(task)
    if n < 1:
        raise ProbeError("n must be at least 1")
    if context_len is not None and n + 1 > context_len:
        raise ProbeError(f"n={n} needs {n + 1} positions but context_len is {context_len}")
    if task is ProbeTask.FINDING_ZERO:
        return [ONE] * (n + 1), [ZERO] + [ONE] * n
    return [ONE] * n, [ONE] * (n + 1)


@dataclass
class ProbeEntry:
    n: int
    linf_norm: float
    normalized: float


@dataclass
class ProbeReport:
    task: ProbeTask
    entries: list[ProbeEntry]
    model_tag: str
    reference_n: int
    representation: str = "final_norm"
    reconstructed_task: bool = False

    def normalized(self) -> dict[int, float]:
        return {e.n: e.normalized for e in self.entries}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _final_representation(model: Cogformer, tokens, prenorm: bool) -> np.ndarray:
    key = "prenorm_final" if prenorm else "final"
    res = forward(model, tokens, capture=(key,))
    rep = res.prenorm_final if prenorm else res.final
    return rep[-1].astype(np.float64)


def collapse_probe(
    model: Cogformer,
    task: ProbeTask | str,
    n_list,
    reference_n: int,
    model_tag: str = "",
    prenorm: bool = False,
) -> ProbeReport:
    """Max-abs difference between last-position representations of a task pair.

    Values are divided by the one at ``reference_n``. The representation is
    the final-norm output unless ``prenorm`` is set.
    """
    task = ProbeTask(task)
    n_list = list(n_list)
    if reference_n not in n_list:
        raise ProbeError(f"reference n {reference_n} not among {n_list}")
    raw = {}
    for n in n_list:
        a, b = build_task_pair(task, n, model.config.context_len)
        raw[n] = float(np.max(np.abs(_final_representation(model, a, prenorm) - _final_representation(model, b, prenorm))))
    ref = raw[reference_n]
    if ref == 0 or not math.isfinite(ref):
        raise ProbeError(f"reference value at n={reference_n} is {ref}; cannot normalise")
    entries = [ProbeEntry(n, raw[n], raw[n] / ref) for n in n_list]
    return ProbeReport(
        task,
        entries,
        model_tag,
        reference_n,
        representation="prenorm_final" if prenorm else "final_norm",
        reconstructed_task=task is ProbeTask.COUNTING_ONES,
    )


@dataclass
class HeadStats:
    layer: int
    head: int
    activation: str
    sink_score: float
    neg_fraction: float
    row_sum_min: float
    row_sum_max: float
    degenerate_row_count: int
    ov_positivity: float | None = None


@dataclass
class DiagnosticsReport:
    heads: list[HeadStats] = field(default_factory=list)
    n_tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def head_statistics(weights: np.ndarray, degenerate: np.ndarray | None = None) -> dict:
    """Sink / sign statistics for one causal (n, n) weight matrix."""
    n = weights.shape[-1]
    abs_w = np.abs(weights)
    mass = abs_w.sum(axis=-1)
    live_rows = mass > 0
    sink = np.where(live_rows, abs_w[:, 0] / np.where(live_rows, mass, 1), 0.0)
    unmasked = ~np.triu(np.ones((n, n), dtype=bool), k=1)
    sums = weights.sum(axis=-1)
    deg = int(degenerate.sum()) if degenerate is not None else int((~live_rows).sum())
    return {
        "sink_score": float(sink.mean()),
        "neg_fraction": float((weights[unmasked] < 0).mean()),
        "row_sum_min": float(sums.min()),
        "row_sum_max": float(sums.max()),
        "degenerate_row_count": deg,
    }


def ov_positivity(w_v: np.ndarray, w_o_slice: np.ndarray) -> float | None:
    """Sum of real parts of the OV eigenvalues over the sum of their moduli.

    Returns None when the eigensolver fails.
    """
    if w_v.shape[1] != w_o_slice.shape[0] or w_v.shape[0] != w_o_slice.shape[1]:
        raise ProbeError(f"OV factors do not compose to a square map: {w_v.shape} x {w_o_slice.shape}")
    return ov_positivity_matrix(w_v.astype(np.float64) @ w_o_slice.astype(np.float64))


def ov_positivity_matrix(m: np.ndarray) -> float | None:
    try:
        eig = np.linalg.eigvals(np.asarray(m, dtype=np.float64))
    except np.linalg.LinAlgError:
        return None
    total = float(np.abs(eig).sum())
    if total == 0:
        return 0.0
    return float(eig.real.sum() / total)


def attn_diagnostics(model: Cogformer, text: str, window: int | None = None) -> DiagnosticsReport:
    """Per-head statistics on ``text``; ``window`` limits them to the first query positions."""
    tokens = tokenize_bytes(text)
    if not tokens:
        raise ProbeError("diagnostics need non-empty text")
    res = forward(model, tokens, capture=("attention",))
    cfg = model.config
    dh = cfg.d_model // cfg.n_heads
    k = len(tokens) if window is None else min(window, len(tokens))
    report = DiagnosticsReport(n_tokens=k)
    for layer, w in enumerate(res.attention):
        hp = model.head_params(layer)
        for h in range(cfg.n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            stats = head_statistics(w.a[h, :k, :k], w.degenerate[h, :k])
            report.heads.append(
                HeadStats(
                    layer,
                    h,
                    w.activation.value,
                    ov_positivity=ov_positivity(hp.w_v[:, cols], hp.w_o[cols, :]),
                    **stats,
                )
            )
    return report


@dataclass
class BenchEntry:
    len: int
    softmax_ms_per_step: float
    cog_ms_per_step: float
    ratio: float


@dataclass
class BenchReport:
    entries: list[BenchEntry]
    device: str = "cpu"
    batch_size: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _time_steps(model: Cogformer, tokens: np.ndarray, reps: int, warmup: int) -> float:
    tc = TrainConfig(warmup_steps=1, total_steps=2)
    state = OptimState.zeros_like(model.params)
    times = []
    for i in range(warmup + reps):
        t0 = time.perf_counter()
        _, grads = loss_and_grads(model, tokens)
        grads, _ = clip_grad_norm(grads, tc.clip_norm)
        adamw_step(model.params, grads, state, 0.0, tc)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1000)
    return statistics.median(times)


def timing_bench(config: ModelConfig, lengths, reps: int = 5, batch_size: int = 1, warmup: int = 1) -> BenchReport:
    """Median ms per training step (forward, backward, clip, AdamW) for both policies.

    Uses lr = 0 so the parameters stay fixed between repetitions.
    """
    if reps < 3:
        raise ProbeError("reps must be at least 3")
    lengths = list(lengths)
    too_long = [n for n in lengths if n > config.context_len or n < 2]
    if too_long:
        raise ProbeError(f"lengths {too_long} outside [2, context_len={config.context_len}]")
    base = config.to_dict()
    soft = init_params(ModelConfig.from_dict({**base, "activation_policy": ActivationPolicy.ALL_SOFTMAX.value}))
    cog = init_params(ModelConfig.from_dict({**base, "activation_policy": ActivationPolicy.COG_EXCEPT_FIRST_AND_LAST.value}))
    gen = np.random.default_rng(config.seed)
    entries = []
    for n in lengths:
        tokens = gen.integers(0, config.vocab_size, size=(batch_size, n))
        s = _time_steps(soft, tokens, reps, warmup)
        c = _time_steps(cog, tokens, reps, warmup)
        entries.append(BenchEntry(n, s, c, c / s))
    return BenchReport(entries, batch_size=batch_size)


def weight_to_rgb(w: float) -> tuple[int, int, int]:
    """+1 -> red, -1 -> blue, 0 -> white, linear in between."""
    w = min(1.0, max(-1.0, float(w)))
    fade = int(round(255 * (1 - abs(w))))
    if w > 0:
        return 255, fade, fade
    if w < 0:
        return fade, fade, 255
    return 255, 255, 255


def attention_to_ppm(weights: np.ndarray) -> bytes:
    n = weights.shape[0]
    w = np.clip(weights.astype(np.float64), -1, 1)
    fade = np.rint(255 * (1 - np.abs(w))).astype(np.uint8)
    img = np.full((n, n, 3), 255, dtype=np.uint8)
    pos = w > 0
    neg = w < 0
    img[..., 1] = np.where(pos | neg, fade, 255)
    img[..., 2] = np.where(pos, fade, 255)
    img[..., 0] = np.where(neg, fade, 255)
    # causally masked cells stay white
    img[np.triu(np.ones((n, n), dtype=bool), k=1)] = 255
    return f"P6\n{n} {n}\n255\n".encode("ascii") + img.tobytes()


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    width, height = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width, 3)


def export_attention_maps(model: Cogformer, text: str, out_dir) -> list[Path]:
    tokens = tokenize_bytes(text)
    if not tokens:
        raise ProbeError("need non-empty text")
    res = forward(model, tokens, capture=("attention",))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, w in enumerate(res.attention):
        for h in range(w.a.shape[0]):
            path = out / f"layer{layer}_head{h}.ppm"
            path.write_bytes(attention_to_ppm(w.a[h]))
            paths.append(path)
    return paths
