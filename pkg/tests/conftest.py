import os
import sys

import pytest
import torch

# The library lives next to the harness scripts
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "harness"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("NSINDY_OUTPUT_ROOT", str(root))
    return root
