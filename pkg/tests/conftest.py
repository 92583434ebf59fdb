import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tomofocus.geometry import GeometryConfig, build_steering, table1_config

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def table1():
    return build_steering(table1_config())


@pytest.fixture(scope="session")
def tiny_cfg():
    # 4 acquisitions, 6 grid bins: small enough for finite differences
    return GeometryConfig(f_c=10e9, bandwidth=200e6, r=800e3, delta_b=300.0, N=4,
                          delta_s=300.0, M=6)


@pytest.fixture(scope="session")
def tiny(tiny_cfg):
    return build_steering(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(mod.line(n))
