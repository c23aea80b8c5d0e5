import numpy as np
import pytest
from hypothesis import settings

from cmrt.corpus import SynthSpec, generate_corpus, vocabulary_tokens
from cmrt.model import ModelConfig, ToyModel, Vocab

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def spec():
    return SynthSpec()


@pytest.fixture(scope="session")
def vocab(spec):
    return Vocab(vocabulary_tokens(spec))


@pytest.fixture(scope="session")
def small_corpus(spec):
    return generate_corpus(spec, 100, 7)


def tiny_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, d=8, n_speech=1, n_enc=1, n_dec=1, heads=2, ffn=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(vocab):
    return ToyModel.init(tiny_config(len(vocab)), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome; printed again in the terminal summary."""
    def record(n: int, checks: dict[str, bool], detail: str = "") -> None:
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = detail + (f" | failed: {', '.join(failed)}" if failed else "")
        if n in _CRITERIA:
            prev_ok, prev_line = _CRITERIA[n]
            _CRITERIA[n] = (prev_ok and ok, f"{prev_line}; {line}")
        else:
            _CRITERIA[n] = (ok, line)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {line}")
        assert ok, f"criterion {n} failed: {failed} ({detail})"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, line = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {line}")
