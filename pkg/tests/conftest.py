"""Shared fixtures: the small set of coupling matrices and solved bubbles
used across the suite.  Session scope keeps the ODE solves to one each."""

import numpy as np
import pytest

from liouville_lab.coupling import CouplingMatrix
from liouville_lab.radial_bubble import match_sigma, solve_radial


@pytest.fixture(scope="session")
def scalar_coupling():
    return CouplingMatrix([[1.0]])


@pytest.fixture(scope="session")
def offdiag_coupling():
    return CouplingMatrix([[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture(scope="session")
def banded_coupling():
    return CouplingMatrix([[1.0, 2.0], [2.0, 1.0]])


@pytest.fixture(scope="session")
def scalar_bubble(scalar_coupling):
    """The explicit profile ln(8/(1+r^2)^2): sigma = 4, m = 4, I = ln 8."""
    return solve_radial(scalar_coupling, [np.log(8.0)], R=100.0, tol=1e-12)


@pytest.fixture(scope="session")
def bubble_36(offdiag_coupling):
    """Asymmetric bubble with sigma = (3, 6), masses m = (6, 3), m* = 3."""
    return match_sigma(offdiag_coupling, [3.0, 6.0], tol=1e-9)


@pytest.fixture(scope="session")
def sym_bubble(banded_coupling):
    """Balanced bubble of [[1,2],[2,1]]: sigma = (4/3, 4/3), m = (4, 4)."""
    return match_sigma(banded_coupling, [4.0 / 3.0, 4.0 / 3.0], tol=1e-10)


@pytest.fixture(scope="session")
def bubble_44(offdiag_coupling):
    """Equal-mass bubble of [[0,1],[1,0]]: sigma = (4, 4), m = (4, 4)."""
    return match_sigma(offdiag_coupling, [4.0, 4.0], tol=1e-10)
