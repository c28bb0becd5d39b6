import numpy as np
import pytest

from hsdtune.encoder import EncoderConfig, init_parameters
from hsdtune.preprocess import clean
from hsdtune.synthetic import generate_synthetic_corpus, table_sizes
from hsdtune.tokenizer import build_vocab


@pytest.fixture(scope="session")
def small_corpus():
    return [clean(d) for d in generate_synthetic_corpus(0, table_sizes(400))]


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus, 300)


@pytest.fixture
def tiny_config():
    return EncoderConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_positions=8,
                         vocab_size=20, dropout_rate=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    return init_parameters(tiny_config, 0, fusion_dim=32, dtype=np.float64)


# ------------------------------------------------------------------ acceptance summary

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line, prints it, then asserts."""
    def record(number: int, ok: bool, detail: str = ""):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
