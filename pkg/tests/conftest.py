import os

import pytest
from hypothesis import HealthCheck, settings

from opeproxy import crypto, datagen
from opeproxy.backend import Backend, LoopbackBackend

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def keyset():
    return crypto.Keyset.generate(512)


@pytest.fixture(scope="session")
def full_schema():
    return datagen.profile_schema("full")


@pytest.fixture(scope="session")
def minimal_schema():
    return datagen.profile_schema("minimal")


@pytest.fixture
def loopback():
    return LoopbackBackend(Backend(), record=True)


@pytest.fixture
def disk_backend(tmp_path):
    root = tmp_path / "backend"
    return LoopbackBackend(Backend(str(root)), record=True), root


ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
