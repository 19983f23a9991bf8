import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from prismlike.collector import ReplaySource, SessionConfig, run_session
from prismlike.store import MetricStore

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
FIXTURES = os.path.join(REPO, "fixtures")
GOLDEN = os.path.join(FIXTURES, "golden")


def fixture_trace(name: str) -> str:
    return os.path.join(FIXTURES, f"{name}.jsonl")


def golden_dir(name: str) -> str:
    return os.path.join(GOLDEN, name)


@pytest.fixture(scope="session")
def replayed(tmp_path_factory):
    """Replay each scenario fixture once per test session; yields db paths."""
    cache = {}
    root = tmp_path_factory.mktemp("stores")

    def get(name: str) -> str:
        if name not in cache:
            db = str(root / f"{name}.db3")
            run_session(SessionConfig(ReplaySource(fixture_trace(name)), db))
            cache[name] = db
        return cache[name]

    return get


@pytest.fixture()
def lock_store(replayed):
    with MetricStore.open_ro(replayed("lock_contention")) as store:
        yield store


@pytest.fixture()
def pipe_store(replayed):
    with MetricStore.open_ro(replayed("pipe_chain")) as store:
        yield store


@pytest.fixture()
def external_store(replayed):
    with MetricStore.open_ro(replayed("external_socket")) as store:
        yield store


@pytest.fixture()
def mysql_store(replayed):
    with MetricStore.open_ro(replayed("mysql_like")) as store:
        yield store


@pytest.fixture()
def chain_store(replayed):
    with MetricStore.open_ro(replayed("chain3")) as store:
        yield store
