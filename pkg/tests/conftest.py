import numpy as np
import pytest

from graphtta.backbone import PretrainConfig
from graphtta.data import generate_synthetic
from graphtta.pipeline import prepare, train_backbone


@pytest.fixture(scope="session")
def small_setup():
    """20-node synthetic experiment with a briefly trained backbone, B=8 test stream."""
    ds, g = generate_synthetic(20, 12000, 0.5, seed=11)
    exp = prepare(ds, g, seed=11)
    model = train_backbone(exp, PretrainConfig(epochs=2, seed=11, hidden_dim=16))
    batches = exp.stream("test", 8)
    return exp, model, batches


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    from _util import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
