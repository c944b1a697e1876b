import numpy as np
import pytest
import torch

from dalm.audio.adapters import AdapterConfig
from dalm.data import world
from dalm.model import ModelConfig, build
from dalm.vocab import VocabSpec

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tok():
    return world.default_tokenizer()


def tiny_config(vocab=VocabSpec(16, 0, 1), adapter=True, **kw):
    ad = AdapterConfig(encoder_dim=8, conv_dim=8, queries=3, query_dim=8, query_heads=2, query_layers=1) if adapter else None
    base = dict(layers=2, heads=2, hidden=16, vocab=vocab, max_positions=128, adapter=ad)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number:>2} {name:<22} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
