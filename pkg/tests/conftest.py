import numpy as np
import pytest

from tiltflow import cli

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture(scope="session")
def world():
    """Default 2D world: data pmf and ground-truth cost field."""
    cfg = cli.load_config()
    _, p, cost = cli.build_world(cfg)
    return cfg, p, cost


@pytest.fixture(scope="session")
def trained_flow(world):
    cfg, p, _ = world
    model, history = cli.train_flow_model(cfg, p)
    assert np.all(np.isfinite(history))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
