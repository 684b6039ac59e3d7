import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pipo.memory_model import TOY_MODEL, ModelSpec
from pipo.storage import pack_model

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

SMALL_MODEL = ModelSpec(num_layers=2, hidden_dim=32, vocab_size=64, num_heads=4,
                        num_kv_heads=2, ffn_multiple=16)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    pack_model(TOY_MODEL, d, seed=0)
    return d


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    pack_model(SMALL_MODEL, d, seed=0)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n][1])
