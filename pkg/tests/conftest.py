import math

import pytest
from hypothesis import settings

from ehdetect.model import EnergyModel, NetworkConfig, SensorParams, amplitude_for_snr

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def desk_sensor():
    return SensorParams(gamma_g=2.0, sigma_w2=1e-3, sigma_v2=1.0,
                        signal_A=amplitude_for_snr(3.0), target_pd=0.9)


@pytest.fixture
def desk_energy():
    return EnergyModel(rho=2.0, capacity_K=5, b_u=0.01, T_s=10.0)


@pytest.fixture
def desk_network(desk_sensor, desk_energy):
    return NetworkConfig((desk_sensor,) * 3, (0.5, 0.5), 2e-3, 2, desk_energy)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rayleigh_pdf(g, gamma):
    return 2.0 * g / gamma * math.exp(-g * g / gamma)
