import numpy as np
import pytest

from cobra_bfa.container import EncodedModel
from cobra_bfa.pipeline import RunConfig, generate, train_model
from cobra_bfa.ssm_model import ModelConfig, TokenBatch, init_params

TOY = ModelConfig(vocab_size=32, embed_dim=16, inner_dim=16, state_dim=8, lowrank_dim=4, num_blocks=2, seed=0)


def toy_batch(B=4, T=12, V=32, seed=7):
    rng = np.random.default_rng(seed)
    return TokenBatch.from_streams(rng.integers(0, V, size=(B, T + 1)))


@pytest.fixture(scope="session")
def toy_cfg():
    return TOY


@pytest.fixture(scope="session")
def toy_params():
    return init_params(TOY)


@pytest.fixture(scope="session")
def batch():
    return toy_batch()


@pytest.fixture(scope="session")
def run_cfg():
    return RunConfig()


@pytest.fixture(scope="session")
def trained(run_cfg):
    """Trained FP16 victim and its loss curve, shared by the end-to-end tests."""
    return train_model(generate(run_cfg), run_cfg)


@pytest.fixture(scope="session")
def victim(trained):
    return trained[0]


@pytest.fixture(scope="session")
def victim_int8(victim):
    return EncodedModel.from_params(victim.decoded(), "int8")


@pytest.fixture(scope="session")
def victim_int4(victim):
    return EncodedModel.from_params(victim.decoded(), "int4")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
