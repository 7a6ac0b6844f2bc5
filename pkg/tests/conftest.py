import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--slow", action="store_true", help="run the Monte-Carlo experiment tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte-Carlo runs over many replicates")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip_slow = pytest.mark.skip(reason="Monte-Carlo run; pass --slow to include it")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
