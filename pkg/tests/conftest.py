import pytest

from steernet import experiments as ex
from steernet.config import parse_config


@pytest.fixture(scope="session")
def experiment_cfg():
    """Default experiment configuration; the base LM it describes is cached on disk."""
    return parse_config("")


@pytest.fixture(scope="session")
def trained_base(experiment_cfg):
    return ex.cached_base(experiment_cfg)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance_log():
    def record(n: int, ok: bool, detail: str):
        _ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
