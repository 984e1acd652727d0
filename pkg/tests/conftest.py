import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ilmfusion.data import ParallelCorpus  # noqa: E402
from ilmfusion.models import Model, TransformerConfig  # noqa: E402
from ilmfusion.numerics import make_rng  # noqa: E402

TINY_VOCAB = 24


def tiny_config(**overrides) -> TransformerConfig:
    values = dict(
        vocab_size=TINY_VOCAB, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=2,
        d_ffn=32, dropout=0.0, label_smoothing=0.0, max_positions=64,
    )
    values.update(overrides)
    return TransformerConfig(**values)


def random_sentence(rng, min_len=1, max_len=7, vocab=TINY_VOCAB):
    return [int(t) for t in rng.integers(4, vocab, size=int(rng.integers(min_len, max_len + 1)))]


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_mt():
    return Model.create(tiny_config(), make_rng(7), kind="nmt")


@pytest.fixture
def tiny_lm():
    return Model.create(tiny_config(), make_rng(8), kind="lm")


@pytest.fixture
def tiny_parallel():
    r = make_rng(99)
    src = [random_sentence(r) for _ in range(24)]
    tgt = [random_sentence(r) for _ in range(24)]
    return ParallelCorpus(src, tgt, "A")


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
