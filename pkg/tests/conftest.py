from pathlib import Path

import pytest

from helpers import tiny_synth_config
from src.firespread import event_log
from src.firespread.synthetic import generate


@pytest.fixture(autouse=True)
def _in_memory_event_log():
    event_log.configure(None, quiet=True)
    event_log.clear()
    yield
    event_log.clear()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    """A generated three-year dataset: 3 events a year, 16x16, 5 days."""
    root = tmp_path_factory.mktemp("synth")
    generate(tiny_synth_config(), root)
    return root
