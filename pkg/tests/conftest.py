import sysconfig
from pathlib import Path

import numpy as np
import pytest

from cogattn.model import ModelConfig, init_params

CORPUS_BYTES = 1_100_000


def build_stdlib_corpus(path: Path, min_bytes: int = CORPUS_BYTES) -> Path:
    """Concatenate the interpreter's own stdlib sources into a UTF-8 corpus."""
    stdlib = Path(sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for src in sorted(stdlib.glob("*.py")):
        try:
            text = src.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        chunks.append(text)
        total += len(text.encode("utf-8"))
        if total >= min_bytes:
            break
    if total < min_bytes:
        raise RuntimeError(f"stdlib at {stdlib} only yielded {total} bytes")
    path.write_text("".join(chunks), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Path:
    return build_stdlib_corpus(tmp_path_factory.mktemp("data") / "corpus.txt")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("data") / "small.txt"
    text = "the quick brown fox jumps over the lazy dog. " * 200
    path.write_text(text, encoding="utf-8")
    return path


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=256, context_len=32,
                precision="double", seed=7)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return init_params(tiny_config(activation_policy="cog_except_first"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
