from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsdehom import effective as ef
from rsdehom.harness.config import bundled_path
from rsdehom.medium import build_field, identity_spec, layered_spec, load_field

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BUNDLED = ("identity", "layered", "sheared", "quasi")
SQRT3 = 1.7320508075688772


@pytest.fixture(scope="session")
def identity():
    return build_field(identity_spec(2))


@pytest.fixture(scope="session")
def layered():
    return build_field(layered_spec())


@pytest.fixture(scope="session", params=BUNDLED)
def bundled(request):
    return load_field(bundled_path("fields", f"{request.param}.yaml"))


@pytest.fixture(scope="session")
def sheared():
    return load_field(bundled_path("fields", "sheared.yaml"))


@pytest.fixture(scope="session")
def layered_eff(layered):
    return ef.compute_effective(layered, cutoff=32, tol=1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
