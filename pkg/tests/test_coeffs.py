import math

import numpy as np
import pytest

from coarsenkit import coeffs
from coarsenkit.errors import CapabilityError, ConfigError, DomainError, ParameterError


def test_lsw_values(lsw):
    assert lsw.eval(1.0) == (0.0, 0.0)
    phi, psi = lsw.eval(0.125)
    assert phi == pytest.approx(0.375, rel=1e-13)
    assert psi == pytest.approx(0.5, rel=1e-13)


def test_lsw_slopes_at_one(lsw):
    phi1, psi1 = lsw.eval(1.0, order=1)
    assert phi1 == pytest.approx(-2.0 / 3.0, rel=1e-13)
    assert psi1 == pytest.approx(-1.0 / 3.0, rel=1e-13)
    h = 1e-5
    fd = [(a - b) / (2 * h) for a, b in zip(lsw.eval(1.0 - h), lsw.eval(1.0 - 3 * h))]
    # one-sided stencil centred at 1 - 2h
    exact = lsw.eval(1.0 - 2 * h, order=1)
    assert fd == pytest.approx(list(exact), rel=1e-6)


def test_quadratic_values(quad):
    phi, psi = quad.eval(0.5)
    assert phi == pytest.approx(0.125)
    assert psi == pytest.approx(0.5)


def test_eval_domain_errors(lsw):
    with pytest.raises(DomainError):
        lsw.eval(0.0)
    with pytest.raises(DomainError):
        lsw.eval(1.5)
    with pytest.raises(DomainError):
        lsw.eval_in_s(0.0)
    with pytest.raises(ParameterError):
        lsw.eval(0.5, order=4)


def test_third_order_capability():
    pair = coeffs.custom(
        phi=(lambda x: x * (1 - x), lambda x: 1 - 2 * x, lambda x: -2.0 + 0 * x),
        psi=(lambda x: 1 - x, lambda x: -1.0 + 0 * x, lambda x: 0.0 * x),
    )
    with pytest.raises(CapabilityError):
        pair.eval(0.5, order=3)


def test_eval_in_s_deep_boundary(lsw):
    phi, psi = lsw.eval_in_s(1e-200)
    assert phi == pytest.approx(2.0 / 3.0 * 1e-200, rel=1e-12)
    assert psi == pytest.approx(1.0 / 3.0 * 1e-200, rel=1e-12)


def test_eval_in_s_endpoint(lsw, quad):
    for pair in (lsw, quad):
        phi, psi = pair.eval_in_s(1.0)
        assert phi == pytest.approx(0.0, abs=1e-15)
        assert psi == pytest.approx(1.0, rel=1e-14)


def test_quadratic_small_s(quad):
    s = 1e-10
    phi, psi = quad.eval_in_s(s)
    assert phi == pytest.approx(0.5 * s * (1 - s), rel=1e-14)
    assert psi == pytest.approx(s, rel=1e-14)


def test_lsw_in_s_against_stable_oracle(lsw):
    s = np.geomspace(1e-12, 0.9, 60)
    cbrt_minus_one = np.expm1(np.log1p(-s) / 3.0)
    p_s, q_s = lsw.eval_in_s(s)
    np.testing.assert_allclose(p_s, cbrt_minus_one + s, rtol=1e-13)
    np.testing.assert_allclose(q_s, -cbrt_minus_one, rtol=1e-13)


def test_quadratic_in_s_matches_direct(quad):
    s = np.geomspace(1e-6, 0.5, 40)
    p_s, q_s = quad.eval_in_s(s)
    p_x, q_x = quad.eval(1.0 - s)
    np.testing.assert_allclose(p_s, p_x, rtol=1e-10)
    np.testing.assert_allclose(q_s, q_x, rtol=1e-10)


@pytest.mark.parametrize("name", ["lsw", "quad"])
@pytest.mark.parametrize("order", [1, 2])
def test_derivatives_match_finite_differences(name, order, request):
    pair = request.getfixturevalue(name)
    x = np.linspace(0.05, 0.95, 50)
    h = 1e-5
    lo = np.array(pair.eval(x - h, order - 1))
    hi = np.array(pair.eval(x + h, order - 1))
    fd = (hi - lo) / (2 * h)
    exact = np.array(pair.eval(x, order))
    scale = np.maximum(1.0, np.abs(exact))
    assert np.max(np.abs(fd - exact) / scale) <= 1e-6


def test_kappa_zero():
    assert coeffs.kappa_zero(coeffs.lsw()) == pytest.approx(2.0, rel=1e-14)
    assert coeffs.kappa_zero(coeffs.quadratic(-0.5, -1, 0)) == 0.5
    assert coeffs.kappa_zero(coeffs.quadratic(-0.9, -0.3, 1.0)) == pytest.approx(3.0)


def test_lsw_conditions_hold(lsw):
    report = coeffs.validate_conditions(lsw)
    assert report.passed, report.checks
    assert all(report.groups.values())


def test_quadratic_conditions(quad):
    report = coeffs.validate_conditions(quad)
    assert report.groups["phi_conditions"]
    assert report.groups["psi_conditions"]


def test_curvature_gap_violation():
    # phi'' = 2 phi1 = -1, psi'' = -1: psi'' - phi'' = 0
    report = coeffs.validate_conditions(coeffs.quadratic(-0.5, -1.0, -1.0))
    assert not report.checks["curvature_gap"]
    assert not report.groups["psi_conditions"]


def test_validate_needs_samples(lsw):
    with pytest.raises(ParameterError):
        coeffs.validate_conditions(lsw, n_samples=4)


def test_positive_interior(lsw, quad):
    x = coeffs.clustered_grid(200)
    for pair in (lsw, quad):
        phi, psi = pair.eval(x)
        assert np.all(phi > 0) and np.all(psi > 0)


def test_lsw_superlinear_at_zero(lsw):
    phi, _ = lsw.eval(1e-9)
    assert phi / 1e-9 > 100
    assert lsw.phi_superlinear_at_0


def test_from_config():
    assert coeffs.from_config({"kind": "lsw"}).kind == "lsw"
    q = coeffs.from_config({"kind": "quadratic", "phi1": -0.5, "psi1": -1, "psi2": 0})
    assert q.phi1 == -0.5 and q.psi2 == 0.0
    with pytest.raises(ConfigError):
        coeffs.from_config({"kind": "quadratic", "phi1": -0.5})
    with pytest.raises(ConfigError):
        coeffs.from_config({"kind": "cubic"})


def test_jensen_bound_values(lsw, quad):
    # Quadratic: [0.5 + max phi on [0, 0.5]] / psi(0.5) = (0.5 + 0.125) / 0.5
    assert coeffs.kappa_upper_bound(quad, 0.5) == pytest.approx(1.25, rel=1e-10)
    # LSW: sup of x^(1/3) on [0, 0.5] minus nothing, by brute force on a fine grid
    x = np.linspace(0.0, 0.5, 200001)
    brute = (0.5 + np.max(np.cbrt(x) - x)) / (1.0 - math.pow(0.5, 1.0 / 3.0))
    assert coeffs.kappa_upper_bound(lsw, 0.5) == pytest.approx(brute, rel=1e-8)
