"""Byte-level training loop: batching, AdamW, warmup+cosine schedule, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from cogattn.model import Cogformer, ModelConfig, loss_and_grads, param_shapes
from cogattn.numerics import Rng

log = logging.getLogger(__name__)

MAGIC = b"COGCKPT1"
ADAM_EPS = 1e-8
DATA_STREAM = 0xDA7A


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_tokens: int = 8192
    lr_peak: float = 2e-4
    warmup_steps: int = 200
    total_steps: int = 3000
    final_lr_fraction: float = 0.04
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError(f"final_lr_fraction must be in (0, 1], got {self.final_lr_fraction}")
        if self.batch_tokens <= 0:
            raise ConfigError("batch_tokens must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.log_every <= 0:
            raise ConfigError("log_every must be positive")
        if self.ckpt_every < 0:
            raise ConfigError("ckpt_every must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def tokenize_bytes(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize_bytes(tokens) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8")


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to ``final_lr_fraction * lr_peak``."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    peak = config.lr_peak
    if step < config.warmup_steps:
        return peak * (step + 1) / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    floor = config.final_lr_fraction
    return peak * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name, g in grads.items():
        sq = float(np.sum(np.square(g, dtype=np.float64)))
        if not math.isfinite(sq):
            raise NumericalError(f"non-finite gradient in {name}")
        total += sq
    return math.sqrt(total)


def clip_grad_norm(grads: dict[str, np.ndarray], clip: float):
    """Scale all gradients by ``clip / norm`` when the global L2 norm exceeds ``clip``."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    norm = global_norm(grads)
    if norm > clip:
        factor = clip / norm
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads, norm


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def decays(name: str, param: np.ndarray) -> bool:
    # norm gains are left undecayed
    return param.ndim >= 2


def adamw_step(params, grads, state: OptimState, lr: float, config: TrainConfig):
    """One decoupled-weight-decay Adam update, applied in place.

    Returns ``(params, state)`` for convenience.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    b1, b2 = config.betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        with np.errstate(invalid="ignore", over="ignore"):
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(ADAM_EPS))
        if not np.all(np.isfinite(update)):
            raise NumericalError(f"non-finite update for {name}")
        if decays(name, p) and config.weight_decay:
            p -= dt(lr * config.weight_decay) * p
        p -= dt(lr) * update
    return params, state


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    lr: float
    wall_ms: float


@dataclass
class LossTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, record: TraceRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trace steps must be strictly increasing")
        self.records.append(record)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "LossTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                trace.append(TraceRecord(**json.loads(line)))
        return trace


class WindowSampler:
    """Contiguous non-overlapping windows, reshuffled each epoch.

    The batch for a given step is a pure function of (seed, step), so a
    resumed run sees exactly the batches the uninterrupted run would.
    """

    def __init__(self, tokens: np.ndarray, context_len: int, batch_size: int, seed: int):
        n_windows = len(tokens) // context_len
        if n_windows < 1:
            raise ConfigError(f"corpus has {len(tokens)} tokens, shorter than context_len {context_len}")
        self.windows = tokens[: n_windows * context_len].reshape(n_windows, context_len)
        self.batch_size = batch_size
        self.rng = Rng(seed, DATA_STREAM)
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: self.rng.substream(epoch).generator().permutation(len(self.windows))}
        return self._perms[epoch]

    def batch(self, step: int) -> np.ndarray:
        n = len(self.windows)
        rows = []
        for pos in range(step * self.batch_size, (step + 1) * self.batch_size):
            rows.append(self._perm(pos // n)[pos % n])
        return self.windows[np.array(rows)]


def load_corpus(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"corpus not found: {path}")
    data = path.read_bytes()
    if not data:
        raise ConfigError(f"corpus is empty: {path}")
    data.decode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


@dataclass
class TrainResult:
    model: Cogformer
    state: OptimState
    trace: LossTrace
    checkpoints: list[Path]


def train(
    model: Cogformer,
    corpus_path,
    config: TrainConfig,
    out_dir=None,
    state: OptimState | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
) -> TrainResult:
    """Train ``model`` in place from ``start_step`` up to ``stop_step`` (default total_steps).

    A record is logged every ``log_every`` steps and at the last step. With
    ``out_dir`` set, the trace goes to ``trace.jsonl`` and checkpoints to
    ``ckpt_<step>.bin`` every ``ckpt_every`` completed steps.
    """
    tokens = load_corpus(corpus_path)
    ctx = model.config.context_len
    sampler = WindowSampler(tokens, ctx, max(1, config.batch_tokens // ctx), config.seed)
    state = state or OptimState.zeros_like(model.params)
    stop = config.total_steps if stop_step is None else stop_step
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace = LossTrace()
    checkpoints = []
    for step in range(start_step, stop):
        t0 = time.perf_counter()
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grads(model, sampler.batch(step))
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at step {step}")
        grads, _ = clip_grad_norm(grads, config.clip_norm)
        lr = lr_at(step, config)
        adamw_step(model.params, grads, state, lr, config)
        wall_ms = (time.perf_counter() - t0) * 1000
        if step % config.log_every == 0 or step == stop - 1:
            trace.append(TraceRecord(step, loss, lr, wall_ms))
            log.info("step %d loss %.4f lr %.3g (%.0f ms)", step, loss, lr, wall_ms)
        done = step + 1
        if out is not None and config.ckpt_every and done % config.ckpt_every == 0:
            path = out / f"ckpt_{done:06d}.bin"
            save_checkpoint(model, state, done, path, config)
            checkpoints.append(path)
    if out is not None:
        trace.write(out / "trace.jsonl")
    return TrainResult(model, state, trace, checkpoints)


def _dtype_name(a: np.ndarray) -> str:
    return {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}[a.dtype]


def save_checkpoint(model: Cogformer, state: OptimState | None, step: int, path, train_config: TrainConfig | None = None):
    """Write ``MAGIC | u32 header length | JSON header | raw little-endian tensors``."""
    tensors = [(f"model.{k}", v) for k, v in model.params.items()]
    if state is not None:
        tensors += [(f"optim.m.{k}", v) for k, v in state.m.items()]
        tensors += [(f"optim.v.{k}", v) for k, v in state.v.items()]
    directory = []
    offset = 0
    for name, arr in tensors:
        nbytes = arr.size * arr.itemsize
        directory.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_name(arr), "offset": offset})
        offset += nbytes
    header = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "tie_embeddings": model.tie_embeddings,
        "step": int(step),
        "optim_step": state.step if state is not None else None,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


@dataclass
class Checkpoint:
    model: Cogformer
    state: OptimState | None
    step: int
    train_config: TrainConfig | None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"magic mismatch in {path}: expected {MAGIC!r}, found {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"truncated header length in {path}")
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    if len(raw) < pos + hlen:
        raise CheckpointError(f"truncated header in {path}")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header in {path}: {exc}") from exc
    payload = memoryview(raw)[pos + hlen :]

    config = ModelConfig.from_dict(header["model_config"])
    tie = bool(header["tie_embeddings"])
    expected = param_shapes(config, tie)
    params, m, v = {}, {}, {}
    end = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise CheckpointError(f"truncated payload for {name} in {path}")
        arr = np.frombuffer(payload[start:stop], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        kind, _, pname = name.partition(".")
        if kind == "optim":
            which, _, pname = pname.partition(".")
            target = m if which == "m" else v
        else:
            target = params
        if pname not in expected or expected[pname] != shape:
            raise CheckpointError(f"shape mismatch for {name}: header {shape}, config {expected.get(pname)}")
        target[pname] = arr
        end = max(end, stop)
    if set(params) != set(expected):
        raise CheckpointError(f"missing tensors in {path}: {sorted(set(expected) - set(params))}")
    if end != len(payload):
        raise CheckpointError(f"payload length {len(payload)} does not match directory ({end} bytes)")
    model = Cogformer(config, params, tie)
    state = OptimState(m, v, header["optim_step"]) if m else None
    tc = header.get("train_config")
    return Checkpoint(model, state, header["step"], TrainConfig.from_dict(tc) if tc else None)
