import numpy as np
import pytest

from pfnet import PerturbSpec, generate_dataset, load_case, simplify_case
from pfnet.grid import Branch, Bus, BusKind, Generator, GridCase


def two_bus(p=0.1, q=0.05, r=0.01, x=0.1, vm=1.0):
    buses = [Bus(1, BusKind.SLACK, 0.0, 0.0, vm, 0.0), Bus(2, BusKind.PQ, p, q, 1.0, 0.0)]
    return GridCase(100.0, buses, [Branch(0, 1, r, x)], [Generator(0, 0.0, vm)], name="two_bus")


def three_bus(p=0.3, q=0.1):
    """Slack, PV and PQ on a triangle."""
    buses = [Bus(1, BusKind.SLACK, 0.0, 0.0, 1.02, 0.0),
             Bus(2, BusKind.PV, 0.1, 0.0, 1.01, 0.0),
             Bus(3, BusKind.PQ, p, q, 1.0, 0.0)]
    branches = [Branch(0, 1, 0.02, 0.2), Branch(1, 2, 0.01, 0.15), Branch(0, 2, 0.03, 0.25)]
    gens = [Generator(0, 0.0, 1.02), Generator(1, 0.4, 1.01)]
    return GridCase(100.0, buses, branches, gens, name="three_bus")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def simple14(case14):
    return simplify_case(case14)


@pytest.fixture(scope="session")
def small_ds(case14):
    """200 case14 scenarios, the usual 50/20/30 split."""
    return generate_dataset(case14, PerturbSpec(seed=7), 200)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
