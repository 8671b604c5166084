import math

import numpy as np
import pytest
from scipy import integrate, special

from coarsenkit import coeffs, quadmodel
from coarsenkit.errors import CapabilityError, DomainError, ParameterError


def limit_formula(p, pair):
    beta0 = p / (p + 1.0)
    return (1.0 / beta0 - 1.0 + abs(pair.phi1)) / abs(pair.psi1)


@pytest.fixture(scope="module")
def uv_linear(quad, linear_profile):
    return quadmodel.integrate_uv(linear_profile, quad, 10.0)


@pytest.fixture(scope="module")
def uv_critical_long(quad, critical_profile):
    return quadmodel.integrate_uv(critical_profile, quad, 500.0, t_eval=[0.0, 20.0, 60.0, 500.0])


def test_coefficients(quad):
    co = quadmodel.coefficients(quad)
    assert co.q == 0.0
    assert co.a2 == pytest.approx(0.5)
    other = quadmodel.coefficients(coeffs.quadratic(-0.5, -1.0, 1.0))
    assert other.q == pytest.approx(0.5)
    assert other.a2 == pytest.approx(0.75)


def test_rejects_non_quadratic(lsw, linear_profile):
    with pytest.raises((CapabilityError, ParameterError)):
        quadmodel.integrate_uv(linear_profile, lsw, 1.0)


def test_closed_form_at_start(uv_linear, quad):
    st = uv_linear[0]
    x = np.linspace(0.0, 0.99, 7)
    np.testing.assert_allclose(quadmodel.closed_form_F(st, quad, x), x, atol=1e-15)


def test_uv_constraint_and_monotonicity(uv_linear):
    assert np.max(np.abs(uv_linear.residual)) <= 1e-8
    assert np.all(np.diff(uv_linear.v) >= 0.0)
    assert np.all(uv_linear.u > 0.0)
    assert uv_linear.kappa[0] == pytest.approx(7.0 / 6.0, rel=1e-9)


def test_uv_mass_by_quadrature(uv_linear, quad, linear_profile):
    """w = e^t w0(F(x, t)) integrates to one at an interior time."""
    st = uv_linear.state_at(3.3)

    def integrand(x):
        s = 1.0 - x
        return float(linear_profile.w0(1.0 - s / (st.u + st.a * s)))

    total = math.exp(3.3) * integrate.quad(integrand, 0.0, 1.0, epsabs=1e-13)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


def test_state_at_outside_range(uv_linear):
    with pytest.raises(DomainError):
        uv_linear.state_at(11.0)


def test_subcritical_limit(uv_linear, quad):
    assert uv_linear.kappa[-1] == pytest.approx(1.5, abs=0.01)
    assert quadmodel.limit_kappa(1.0, quad) == pytest.approx(limit_formula(1.0, quad), rel=1e-10)
    assert quadmodel.limit_kappa(3.0, quad) == pytest.approx(limit_formula(3.0, quad), rel=1e-10)


def test_G0_at_origin(quad):
    G0, dG0 = quadmodel.G0_eval(0.0, 1.0, quad)
    assert G0 == pytest.approx(0.5, rel=1e-12)
    h = 1e-5
    fd = (quadmodel.G0_eval(0.5 + h, 3.0, quad)[0] - quadmodel.G0_eval(0.5 - h, 3.0, quad)[0]) / (2 * h)
    assert quadmodel.G0_eval(0.5, 3.0, quad)[1] == pytest.approx(fd, rel=1e-7)


@pytest.mark.parametrize("pair_args", [(-0.5, -1.0, 0.0), (-0.5, -1.0, 1.0), (-0.25, -0.5, 0.4)])
@pytest.mark.parametrize("p", [0.5, 1.0, 3.0])
def test_lemma_margins_nonnegative(pair_args, p):
    pair = coeffs.quadratic(*pair_args)
    for xi in np.linspace(0.0, 6.0, 13):
        m3, n3 = quadmodel.lemma_margins(xi, p, pair)
        assert m3 >= -1e-8 and n3 >= -1e-8


def test_limit_system_fixed_point(quad):
    dxi, _ = quadmodel.limit_rhs(2.0, 2.0, quad)
    assert dxi == pytest.approx(0.0, abs=1e-14)
    assert quadmodel.limit_rhs(1.0, 2.0, quad)[0] > 0
    assert quadmodel.limit_rhs(3.0, 2.0, quad)[0] < 0


def test_reduced_rhs_signs(quad, linear_profile):
    # close to the limit (eta small) the reduced flow pushes xi toward p = 1
    assert quadmodel.reduced_rhs(0.5, 1e-6, 1.0, linear_profile, quad)[0] > 0
    assert quadmodel.reduced_rhs(1.5, 1e-6, 1.0, linear_profile, quad)[0] < 0
    with pytest.raises(DomainError):
        quadmodel.G0_two(0.5, 1.5, linear_profile, quad)


def test_reduced_matches_uv(quad, linear_profile, uv_linear):
    red = quadmodel.integrate_reduced(linear_profile, quad, 4.0, t_eval=[0.0, 2.0, 4.0])
    np.testing.assert_allclose(red.kappa, uv_linear.kappa_at([0.0, 2.0, 4.0]), atol=1e-7)
    np.testing.assert_allclose(red.xi, [uv_linear.state_at(t).v / uv_linear.state_at(t).u for t in (0, 2, 4)],
                               atol=1e-8)


def test_reduced_needs_subcritical(quad, critical_profile):
    with pytest.raises(ParameterError):
        quadmodel.integrate_reduced(critical_profile, quad, 1.0)


def test_critical_constants(quad):
    cc = quadmodel.critical_constants(quad)
    assert cc.alpha == pytest.approx(2.0)
    assert cc.beta_const == 0.0
    assert abs(cc.residual()) <= 1e-12
    assert cc.tau0 == pytest.approx(-math.log(special.expn(2, 2.0)), abs=1e-10)
    for a in (0.5, 2.0, 7.0):
        assert quadmodel._exp_tail_integral(a) == pytest.approx(quadmodel.exp_tail_integral_exact(a), rel=1e-10)


def test_critical_constants_shifted_pair():
    pair = coeffs.quadratic(-0.5, -1.0, 1.0)
    cc = quadmodel.critical_constants(pair)
    # a2 = 3/4 and q = 1/2
    assert cc.alpha == pytest.approx(4.0 / 3.0)
    assert cc.beta_const == pytest.approx(2.0 / 3.0)
    assert cc.tau0 == pytest.approx(2.0 / 3.0 - math.log(special.expn(2, 4.0 / 3.0)), abs=1e-10)


def test_critical_long_run(uv_critical_long, quad, critical_profile):
    st = uv_critical_long.state_at(500.0)
    assert st.kappa == pytest.approx(0.5, abs=1e-6)
    assert st.u / st.v < 0.05
    slope, intercept = quadmodel.fit_lag_coefficients(st, quad, np.linspace(0.0, 0.5, 11))
    assert slope == pytest.approx(2.0, rel=0.02)
    assert abs(intercept) < 0.05
    rows = quadmodel.critical_track(critical_profile, quad, 500.0, series=uv_critical_long)
    tau0 = quadmodel.critical_constants(quad).tau0
    assert rows[-1]["active"]
    assert rows[-1]["tau"] == pytest.approx(tau0, abs=1e-6)
    assert rows[-1]["dy_dt_over_g"] == pytest.approx(1.0, abs=0.01)
    assert not rows[0]["active"]


def test_z_of_t(critical_profile):
    z = quadmodel.z_of_t(critical_profile, 5.0)
    assert math.exp(5.0) * critical_profile.w0(z) == pytest.approx(1.0, rel=1e-10)
    with pytest.raises(DomainError):
        quadmodel.z_of_t(critical_profile, -5.0)
