import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from plasmalab.equilibrium import RadialPolynomialPotential, solve_equilibrium_radial


@pytest.fixture(scope="session")
def quadratic_potential():
    return RadialPolynomialPotential((0.0, 1.0))


@pytest.fixture(scope="session")
def circular_law(quadratic_potential):
    """Equilibrium measure of the quadratic potential (density 1/pi on the
    unit disk)."""
    return solve_equilibrium_radial(quadratic_potential, "coulomb")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)


def disk_points(rng, n, radius=0.9):
    th = rng.uniform(0.0, 2.0 * np.pi, n)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    return np.column_stack([r * np.cos(th), r * np.sin(th)])
