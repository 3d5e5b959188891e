import numpy as np
import pytest
from hypothesis import given, strategies as st

from spherebin.errors import DomainError, SingularDerivative
from spherebin.simadjust import g, g_prime


def test_identity_at_t1():
    for z in (-1.0, -0.5, 0.0, 0.5, 1.0):
        assert g(z, 1) == z


def test_direct_values():
    assert g(-0.2, 3) == pytest.approx(-0.872, abs=1e-15)
    assert g(0.0, 3) == pytest.approx(-0.75, abs=1e-15)


def test_derivative_values():
    assert g_prime(0.3, 1) == 1.0
    assert g_prime(1.0, 3) == pytest.approx(3.0, abs=1e-15)
    assert g_prime(0.0, 2) == pytest.approx(1.0, abs=1e-15)


def test_domain():
    assert g(1.0 + 5e-13, 2) == 1.0
    with pytest.raises(DomainError):
        g(1.01, 2)


def test_singular_derivative():
    with pytest.raises(SingularDerivative):
        g_prime(-1.0, 0.3)
    assert np.isfinite(g_prime(-0.5, 0.3))


@given(st.floats(0.05, 8.0))
def test_endpoints(t):
    assert abs(g(-1.0, t) + 1.0) <= 1e-15
    assert abs(g(1.0, t) - 1.0) <= 1e-15


@given(st.floats(0.05, 8.0), st.floats(-1, 1), st.floats(-1, 1))
def test_monotone(t, z1, z2):
    if z1 == z2:
        return
    lo, hi = min(z1, z2), max(z1, z2)
    # strict in exact arithmetic; allow ties only where floats cannot resolve
    assert g(lo, t) <= g(hi, t)


def test_strictly_monotone_grid():
    z = np.linspace(-1, 1, 2001)
    for t in (0.3, 0.5, 1.0, 2.0, 3.0, 5.0):
        assert np.all(np.diff(g(z, t)) > 0)


@given(st.floats(1.0, 6.0), st.floats(-0.999, 0.999))
def test_derivative_matches_fd(t, z):
    h = 1e-6
    fd = (g(z + h, t) - g(z - h, t)) / (2 * h)
    assert abs(g_prime(z, t) - fd) <= 1e-6


@given(st.floats(1.01, 6.0), st.floats(-0.99, 0.99))
def test_range_expansion(t, z):
    assert g(z, t) < z
