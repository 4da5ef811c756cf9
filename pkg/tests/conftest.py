from __future__ import annotations

import pytest

from mixsched.presets import load_preset
from mixsched.trainer import SimulatorSession


@pytest.fixture(scope="session")
def zero_coupling():
    return load_preset("zero-coupling")


@pytest.fixture(scope="session")
def fig4():
    return load_preset("fig4-calibrated")


@pytest.fixture(scope="session")
def forgetting():
    return load_preset("forgetting-on")


@pytest.fixture(scope="session")
def disk_preset():
    return load_preset("disk-distinct-peaks")


@pytest.fixture(scope="session")
def c1_preset():
    return load_preset("c1-flops")


def make_factory(spec):
    def factory():
        s = SimulatorSession(spec.dynamics, spec.grid.step)
        s.init(spec.mixture, spec.seed)
        return s

    return factory


@pytest.fixture()
def factory_of():
    return make_factory
