import numpy as np
import pytest

from streamvoice.config import apply_overrides, tiny_config
from streamvoice.model import StreamVoice


def tiny_model(seed=0, *overrides, dtype=None):
    cfg = apply_overrides(tiny_config(seed), list(overrides)) if overrides else tiny_config(seed)
    return StreamVoice(cfg, dtype=dtype)


def random_inputs(model, t, rng):
    task = model.cfg.task
    s = rng.standard_normal((t, task.semantic_dim)).astype(model.dtype)
    if model.discrete:
        a = rng.integers(0, task.codebook_size, (t, task.codec_layers))
    else:
        a = rng.standard_normal((t, task.continuous_dim)).astype(model.dtype)
    return s, a


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
