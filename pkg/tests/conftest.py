import numpy as np
import pytest

from recprune.autodiff import Tensor
from recprune.model import ModelConfig, init_model
from recprune.recdata import GeneratorConfig, generate

TINY = dict(n_layers=2, n_heads=4, d_k=4, d_model=16, d_ff=24, vocab_size=23, max_seq_len=8)


def make_model(seed=0, scale=0.3, **overrides):
    """Tiny model with every parameter (norms and biases included) set to
    seeded random values, so that no structure is trivially inert."""
    cfg = ModelConfig(**{**TINY, **overrides})
    model = init_model(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in model.named_parameters():
        if name.endswith("norm"):
            t.data = 1.0 + 0.2 * rng.standard_normal(t.shape)
        else:
            t.data = scale * rng.standard_normal(t.shape)
    return model


def random_tokens(model, rng, batch=None, length=None):
    s = length or int(rng.integers(2, model.config.max_seq_len + 1))
    shape = (s,) if batch is None else (batch, s)
    return rng.integers(0, model.config.vocab_size, size=shape)


def tiny_data_config(**kw):
    base = dict(n_items=40, n_users=24, n_clusters=4, steps_per_user=10, h_max=6, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(tiny_data_config())


def as_tensor(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


TINY_PIPELINE = {
    "model.n_layers": "3", "model.n_heads": "4", "model.d_k": "4", "model.d_model": "16",
    "model.d_ff": "24", "model.max_seq_len": "8",
    "data.n_items": "40", "data.n_users": "24", "data.n_clusters": "4",
    "data.steps_per_user": "10", "data.h_max": "6",
    "prune.calib_b": "12", "prune.k_attn": "2", "prune.k_layer": "2",
    "base.epochs": "2", "base.learning_rate": "3e-3", "base.batch_size": "16",
    "stage1.epochs": "1", "stage2.epochs": "1", "stage3.epochs": "1",
    "stage1.batch_size": "16", "stage2.batch_size": "16", "stage3.batch_size": "16",
    "run.observe_b": "12", "run.figures": "false",
}


def tiny_pipeline_config(**extra):
    from recprune.config import PipelineConfig, apply_overrides

    return apply_overrides(PipelineConfig(), {**TINY_PIPELINE, **extra})


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
