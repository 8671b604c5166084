import math

import numpy as np
import pytest

from coarsenkit import coeffs, quadmodel, transformed
from coarsenkit.errors import DomainError, ParameterError


@pytest.fixture(scope="module")
def lsw_tab(lsw):
    return transformed.tables(lsw)


@pytest.fixture(scope="module")
def shifted():
    return coeffs.quadratic(-0.5, -1.0, 1.0)


def test_quadratic_f_closed_form(shifted):
    tab = transformed.tables(shifted)
    x = np.array([0.0, 0.3, 0.9, 0.999, 1 - 1e-12])
    # f = 1/(1 - x) + psi''(1) / (2 |psi'(1)|)
    np.testing.assert_allclose(tab.f(x), 1.0 / (1.0 - x) + 0.5, rtol=1e-13)


def test_lsw_normalization(lsw_tab):
    # sigma f = 1 + sigma/3 + O(sigma^2), read in sigma so that 1 - sigma does not round
    for sigma in (1e-3, 1e-6, 1e-9, 1e-100):
        assert sigma * math.exp(lsw_tab.ln_f_s(sigma)) == pytest.approx(1.0 + sigma / 3.0, rel=sigma**2 + 1e-15)
    x = 1.0 - 1e-3
    assert (1.0 - x) * lsw_tab.f(x) == pytest.approx(1.0 + (1.0 - x) / 3.0, rel=1e-6)


def test_f_solves_its_ode(lsw_tab, lsw):
    x = np.linspace(0.05, 0.95, 10)
    h = 1e-6
    fd = (np.log(lsw_tab.f(x + h)) - np.log(lsw_tab.f(x - h))) / (2 * h)
    _, psi = lsw.eval(x)
    np.testing.assert_allclose(fd, (1.0 / 3.0) / psi, rtol=1e-7)
    np.testing.assert_allclose(lsw_tab.df(x), lsw_tab.f(x) * (1.0 / 3.0) / psi, rtol=1e-12)


def test_inverse_round_trip(lsw_tab):
    x = np.array([0.0, 0.2, 0.7, 0.99, 1 - 1e-10])
    np.testing.assert_allclose(lsw_tab.k(lsw_tab.f(x)), x, atol=1e-13)
    assert lsw_tab.sigma_of_f(math.exp(lsw_tab.ln_f_s(1e-200))) == pytest.approx(1e-200, rel=1e-10)
    with pytest.raises(DomainError):
        lsw_tab.k(0.5 * lsw_tab.f0)
    with pytest.raises(DomainError):
        lsw_tab.f(1.0)


def test_alpha0_values(lsw, quad, shifted):
    assert transformed.alpha0(lsw) == pytest.approx(1.0 / 3.0)
    assert transformed.alpha0(quad) == pytest.approx(0.5)
    assert transformed.alpha0(shifted) == pytest.approx(0.75)


def test_quadratic_flow_is_a_shift(shifted):
    tab = transformed.tables(shifted)
    for z in (tab.f0 * 2.0, 10.0, 1e4):
        for u in (1.0, 2.0):
            assert tab.g_zu(z, u) == pytest.approx(-0.75 * u, rel=1e-12)
    np.testing.assert_allclose(tab.gamma(np.linspace(0.0, 1.0, 11)), 0.0, atol=1e-14)


def test_lsw_far_field(lsw_tab):
    assert -lsw_tab.g_zu(1e6, 1.0) == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert -lsw_tab.g_zu(1e9, 3.0) / 3.0 == pytest.approx(1.0 / 3.0, abs=1e-8)


def test_gamma_is_dg_dz(lsw_tab):
    u = 1.5
    for x in (0.1, 0.5, 0.9, 0.999):
        z = float(lsw_tab.f(x)) * u
        h = 1e-6 * z
        fd = (lsw_tab.g_zu(z + h, u) - lsw_tab.g_zu(z - h, u)) / (2 * h)
        assert fd == pytest.approx(float(lsw_tab.gamma(x)), rel=1e-5, abs=1e-9)


def test_lsw_gamma_shape(lsw_tab):
    x = np.linspace(1e-4, 1 - 1e-4, 500)
    gam = lsw_tab.gamma(x)
    assert np.all(gam >= 0.0) and np.all(np.diff(gam) < 0.0)
    assert lsw_tab.gamma(1.0) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DomainError):
        lsw_tab.gamma(0.0)


def test_lsw_velocity_concave_in_z(lsw_tab):
    zs = np.geomspace(lsw_tab.f0 * 1.01, 1e5, 40)
    g = np.array([lsw_tab.g_zu(z, 1.0) for z in zs])
    slopes = np.diff(g) / np.diff(zs)
    assert np.all(np.diff(slopes) <= 1e-12)


def test_sandwich_constants(lsw_tab):
    zs = np.geomspace(lsw_tab.f0 * 1.5, 1e6, 25)
    c1, c2 = transformed.sandwich_constants(lsw_tab, zs, [1.0, 2.0])
    assert 0.0 < c1 <= 1.0 / 3.0 + 1e-6 <= c2 + 1e-6
    with pytest.raises(DomainError):
        transformed.sandwich_constants(lsw_tab, [0.1], [1.0])


def test_P6_on_reduced_states(quad, linear_profile):
    uv = quadmodel.integrate_uv(linear_profile, quad, 3.0)
    for t in (0.0, 1.0, 3.0):
        assert transformed.cross_check_P6(uv.state_at(t), quad, [0.0, 0.4, 0.8, 0.95]) <= 1e-12


def test_uv_from_kappa_constant():
    pair = coeffs.quadratic(-0.5, -1.0, 0.0)
    t = np.linspace(0.0, 2.0, 21)
    u, v = transformed.uv_from_kappa(pair, t, np.full_like(t, 1.0), 2.0)
    # ln u = (phi'(1) - psi'(1) kappa) t = 0.5 t
    assert u == pytest.approx(math.e, rel=1e-10)
    assert v == pytest.approx(2.0 * (math.e - 1.0), rel=1e-10)


def test_requires_decreasing_psi():
    bad = coeffs.custom(phi=(lambda x: x * (1 - x), lambda x: 1 - 2 * x, lambda x: -2 + 0 * x),
                        psi=(lambda x: 1 + 0 * x, lambda x: 0 * x, lambda x: 0 * x))
    with pytest.raises(ParameterError):
        transformed.tables(bad)


def test_gamma_vanishes_at_one(lsw_tab):
    assert abs(float(lsw_tab.gamma(1.0 - 1e-4))) < 1e-2
    # Gamma'(1) = 0 as well, so Gamma is quadratically small
    assert float(lsw_tab.gamma(1.0 - 1e-4)) < 10 * float(lsw_tab.gamma(1.0 - 1e-3)) * 1e-2
