import numpy as np
import pytest

from fusionformer.data import Vocab, build_sample, synth_corpus
from fusionformer.model import FusionTransformer, ModelConfig


def central_difference(f, t, index, h=1e-5):
    """d f / d t[index] by central differences; restores ``t`` afterwards."""
    orig = t.data[index]
    t.data[index] = orig + h
    up = f()
    t.data[index] = orig - h
    down = f()
    t.data[index] = orig
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    samples = synth_corpus(seed=3, n_samples=12, vocab_size=200)
    vocab = Vocab.from_corpus(samples)
    return samples, vocab, [build_sample(s, vocab) for s in samples]


def make_model(vocab_size, fusion_method="sw", d_model=16, n_heads=4, n_layers=2, seed=0, **kw):
    kw.setdefault("dropout", 0.0)
    cfg = ModelConfig(vocab_size=vocab_size, n_layers=n_layers, d_model=d_model, n_heads=n_heads,
                      fusion_method=fusion_method, **kw)
    return FusionTransformer(cfg, seed=seed).eval()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
