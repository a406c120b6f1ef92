import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gsface.avatar import make_avatar
from gsface.head import generate_synthetic

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def model():
    return generate_synthetic(0)


@pytest.fixture(scope="session")
def avatar(model):
    return make_avatar(model, 0)


@pytest.fixture(scope="session")
def packed(avatar):
    from gsface.modelcodec import pack_container

    return pack_container(avatar)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
