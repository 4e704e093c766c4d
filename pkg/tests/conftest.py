import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spodrom.dataset import PlantedComponent, SynthConfig, compute_fluctuations, synthesize_flow
from spodrom.spod import SpodParams, compute_spod

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config(**kw):
    base = dict(nx=8, nz=6, n_t=512, dt=1.0, dx=0.125, dz=0.125, origin=(0.0, 0.0),
                components=[PlantedComponent(0, 4 / 32, 1.0), PlantedComponent(1, 9 / 32, 0.6, 0.5)],
                snr_db=30.0, with_concentration=True)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def small_data():
    return synthesize_flow(small_config(), seed=3)


@pytest.fixture(scope="session")
def small_fluct(small_data):
    return compute_fluctuations(small_data)[0]


@pytest.fixture(scope="session")
def small_basis(small_fluct):
    return compute_spod(small_fluct, SpodParams(32, 16, "hamming"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed after the run
ACCEPTANCE = []


def record_verdict(n, ok, detail):
    line = f"AC{n} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append((n, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
