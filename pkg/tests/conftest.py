"""Shared fixtures for the fracture width filter tests."""

import pytest

from core.assembly import BoundaryConditions, ModelCoefficients, assemble_system
from core.constants import DEFAULT_CONFIG, PRESETS
from core.geometry import build_geometry, generate_mesh

from .helpers import cross_spec, single_spec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-scale twin experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def single_mesh():
    return generate_mesh(build_geometry(single_spec()), 0.1)


@pytest.fixture
def cross_mesh():
    return generate_mesh(build_geometry(cross_spec()), 0.1)


@pytest.fixture
def case1_boundary():
    return BoundaryConditions.from_dict(DEFAULT_CONFIG["boundary"])


@pytest.fixture
def case3_boundary():
    data = dict(DEFAULT_CONFIG["boundary"])
    data.update(PRESETS["case3a"]["boundary"])
    return BoundaryConditions.from_dict(data)


@pytest.fixture
def single_system(single_mesh, case1_boundary):
    coeffs = ModelCoefficients.uniform(2)
    return assemble_system(single_mesh, coeffs, case1_boundary)
