import pytest

from pageflow import workloads


@pytest.fixture(scope="session")
def corpus():
    names = ("lr", "wc", "kmeans", "pr", "sortcache", "copycache", "grow", "symprop", "cyclic")
    return {name: workloads.load_program(name) for name in names}


@pytest.fixture()
def lr(corpus):
    return corpus["lr"]


@pytest.fixture()
def spill_dir(tmp_path):
    d = tmp_path / "spill"
    d.mkdir()
    return str(d)
