import numpy as np
import pytest

from paracon.bundle import ConnectionSpec, Domain
from paracon.expr import parse_expr

TWO_PI = 2.0 * np.pi


@pytest.fixture
def sphere_spec():
    dom = Domain(names=("theta", "phi"), lows=(0.1, 0.0),
                 highs=(np.pi - 0.1, TWO_PI), periods=(None, TWO_PI))
    gamma = {
        (0, 1, 1): parse_expr("-sin(theta)*cos(theta)"),
        (1, 0, 1): parse_expr("cos(theta)/sin(theta)"),
        (1, 1, 0): parse_expr("cos(theta)/sin(theta)"),
    }
    return ConnectionSpec(dom, kind="christoffel", gamma=gamma)


def punctured_plane_spec(k=0.3):
    dom = Domain(names=("r", "theta"), lows=(0.2, 0.0), highs=(3.0, TWO_PI),
                 periods=(None, TWO_PI), excluded=(parse_expr("r"),))
    gamma = {
        (0, 1, 1): parse_expr("-k^2*r"),
        (1, 0, 1): parse_expr("1/r"),
        (1, 1, 0): parse_expr("1/r"),
    }
    return ConnectionSpec(dom, kind="christoffel", params={"k": k}, gamma=gamma)


@pytest.fixture
def plane_spec():
    dom = Domain(names=("r", "theta"), lows=(0.2, 0.0), highs=(3.0, TWO_PI),
                 periods=(None, TWO_PI))
    return punctured_plane_spec()


@pytest.fixture
def flat_spec():
    dom = Domain(names=("x", "y"), lows=(-2.0, -2.0), highs=(2.0, 2.0))
    return ConnectionSpec(dom, kind="christoffel", gamma={})


@pytest.fixture
def pathology_spec():
    dom = Domain(names=("x", "y"), lows=(-3.0, -1.0), highs=(3.0, 1.0))
    gxyy = parse_expr(
        "if(x < x0, -exp(-1/(x-x0)^2)/(x-x0)^3,"
        " if(x <= x1, 0, -exp(-1/(x-x1)^2)/(x-x1)^3))")
    gyxy = parse_expr(
        "if(x < x0, exp(-1/(x-x0)^2)/((x-x0)^3*(a+exp(-1/(x-x0)^2))),"
        " if(x <= x1, 0, exp(-1/(x-x1)^2)/((x-x1)^3*(b+exp(-1/(x-x1)^2)))))")
    gamma = {(0, 1, 1): gxyy, (1, 0, 1): gyxy, (1, 1, 0): gyxy}
    return ConnectionSpec(dom, kind="christoffel",
                          params={"a": 1.0, "b": 2.0, "x0": 0.0, "x1": 1.0},
                          gamma=gamma)


@pytest.fixture
def circle_line_spec():
    dom = Domain(names=("phi",), lows=(0.0, ), highs=(TWO_PI,),
                 periods=(TWO_PI,))
    return ConnectionSpec(dom, kind="matrix", fiber_dim=1,
                          omega=[[[parse_expr("1")]]])


@pytest.fixture
def dtheta_spec():
    # Levi-Civita of dr^2 + e^{2r} dtheta^2 twisted so nabla g = g (x) dtheta
    dom = Domain(names=("r", "theta"), lows=(0.5, 0.0), highs=(3.0, TWO_PI),
                 periods=(None, TWO_PI))
    gamma = {
        (0, 1, 1): parse_expr("-exp(2*r)"),
        (0, 1, 0): parse_expr("-1/2"),
        (1, 0, 1): parse_expr("1"),
        (1, 1, 0): parse_expr("1"),
        (1, 1, 1): parse_expr("-1/2"),
    }
    return ConnectionSpec(dom, kind="christoffel", gamma=gamma)


def zero():
    return parse_expr("0")


@pytest.fixture
def staircase_spec():
    # N=3 matrix connection whose flag strictly decreases twice: [2, 1, 1]
    dom = Domain(names=("x", "y"), lows=(-2.0, -2.0), highs=(2.0, 2.0))
    z = parse_expr("0")
    omega = [[[z, z] for _ in range(3)] for _ in range(3)]
    omega[2][0] = [parse_expr("1"), z]        # Omega_x = E_31
    omega[1][2] = [z, parse_expr("exp(x)")]   # Omega_y = e^x E_23
    return ConnectionSpec(dom, kind="matrix", fiber_dim=3, omega=omega)
