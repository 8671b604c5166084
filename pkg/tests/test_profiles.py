import math

import numpy as np
import pytest
from scipy import integrate, special

from coarsenkit import profiles
from coarsenkit.errors import ConfigError, DomainError, ParameterError

ALL_KINDS = [
    {"kind": "power_law", "p": 1},
    {"kind": "power_law", "p": 3.5},
    {"kind": "critical_exp"},
    {"kind": "truncated_power", "beta0": 0.3, "x0": 0.05},
    {"kind": "piecewise_beta", "beta0": 0.4, "x0": 0.6, "eps": 0.01},
]


def test_normalization_factors():
    assert profiles.normalization_factor(profiles.PowerLaw(1.0)) == pytest.approx(2.0, rel=1e-12)
    # int_0^1 exp(-1/d) dd = E_2(1)
    expected = 1.0 / special.expn(2, 1.0)
    assert profiles.normalization_factor(profiles.CriticalExp()) == pytest.approx(expected, rel=1e-10)
    assert expected == pytest.approx(6.7342, rel=1e-5)


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s["kind"])
def test_built_profiles_have_unit_mass(spec):
    prof = profiles.build(spec)
    b = prof.support_end
    ref, _ = integrate.quad(lambda x: float(prof.w0(x)), 0.0, b, limit=400, points=[b * 0.99])
    assert prof.mass() == pytest.approx(1.0, abs=1e-12)
    assert ref == pytest.approx(1.0, rel=1e-7)


def test_linear_profile_values(linear_profile):
    assert linear_profile.w0(0.25) == pytest.approx(1.5)
    assert linear_profile.beta_at(0.7) == pytest.approx(0.5)
    assert linear_profile.g_at(0.0) == pytest.approx(0.5)
    assert linear_profile.h0(0.5) == pytest.approx(0.25)


def test_critical_beta_tends_to_one(critical_profile):
    x = 1.0 - np.geomspace(1e-2, 1e-8, 10)
    beta = critical_profile.beta_at(x)
    assert np.all(np.diff(beta) > 0)
    # X e^X E_2(X) = 1 - 2/X + 6/X^2 - ... with X = 1/d
    np.testing.assert_allclose(1.0 - beta, 2.0 * (1.0 - x), rtol=0.04)


def test_critical_deep_tail_is_finite(critical_profile):
    d = np.array([1e-3, 1e-6, 1e-12])
    assert np.all(np.isfinite(critical_profile.ln_w_d(d)))
    np.testing.assert_allclose(critical_profile.g_d(d), d**2, rtol=3e-3)


def test_scaled_e2_matches_scipy_across_switch():
    X = np.array([0.5, 10.0, 49.999, 50.0, 50.001, 200.0])
    direct = special.expn(2, X) * np.exp(X)
    np.testing.assert_allclose(profiles.scaled_e2(X), direct, rtol=1e-13)
    assert profiles.scaled_e2(1e6) == pytest.approx(1e-6 * (1 - 2e-6), rel=1e-11)


def test_classify():
    assert profiles.classify(profiles.build({"kind": "power_law", "p": 1})).label == "subcritical"
    assert profiles.classify(profiles.build({"kind": "power_law", "p": 1})).beta0 == pytest.approx(0.5)
    assert str(profiles.classify(profiles.build({"kind": "critical_exp"}))) == "Critical"
    assert profiles.classify(profiles.build(ALL_KINDS[3])).label == "unclassified"
    assert profiles.classify(profiles.build(ALL_KINDS[4])).label == "critical"


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s["kind"])
def test_mean_size_two_ways(spec):
    prof = profiles.build(spec)
    assert profiles.mean_size(prof, "density") == pytest.approx(profiles.mean_size(prof, "beta"), rel=1e-9)


def test_mean_size_known_values(linear_profile, critical_profile):
    assert profiles.mean_size(linear_profile) == pytest.approx(0.5, rel=1e-12)
    # for full support the mean is 1 / w0(0) = e E_2(1)
    assert profiles.mean_size(critical_profile) == pytest.approx(math.e * special.expn(2, 1.0), rel=1e-9)
    with pytest.raises(ParameterError):
        profiles.mean_size(linear_profile, "moments")


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s["kind"])
def test_reconstruct_from_beta(spec):
    prof = profiles.build(spec)
    xs = np.linspace(0.0, 0.95 * prof.support_end, 9)
    exact = prof.ln_w0(xs) - prof.ln_w0(0.0)
    np.testing.assert_allclose(profiles.reconstruct_ln_w0(prof, xs), exact, atol=1e-7)


@pytest.mark.parametrize("spec", ALL_KINDS, ids=lambda s: s["kind"])
def test_h0_identity(spec):
    prof = profiles.build(spec)
    xs = np.concatenate([np.linspace(0.0, 0.9, 10), 1 - np.geomspace(1e-6, 0.05, 5)]) * prof.support_end
    assert profiles.h0_identity_residual(prof, xs) <= 1e-8


def test_domain_and_config_errors(linear_profile):
    with pytest.raises(DomainError):
        linear_profile.w0(1.2)
    with pytest.raises(ConfigError):
        profiles.build({"kind": "gaussian"})
    with pytest.raises(ConfigError):
        profiles.build({"kind": "power_law", "q": 2})
    with pytest.raises(ParameterError):
        profiles.PowerLaw(-1.0)
    with pytest.raises(ParameterError):
        profiles.TruncatedPower(beta0=1.2)


def test_truncated_support(linear_profile):
    prof = profiles.build(ALL_KINDS[3])
    assert prof.support_end == 0.05
    assert prof.beta_at(0.01) == pytest.approx(0.3)
    with pytest.raises(DomainError):
        profiles.criterion_residuals(prof, None, [1.0], [1.0])


def test_criterion_zero_shift(critical_profile, lsw):
    res = profiles.criterion_residuals(critical_profile, lsw, [30.0, 60.0], [0.0, 0.5])
    assert np.all(res[:, 0] == 0.0)
    assert np.all(res[:, 1] < 0.1)


def test_y_variable_inverse(lsw):
    yv = profiles.YVariable(lsw)
    for sigma in (0.9, 0.1, 1e-3, 1e-7):
        assert yv.sigma_of_y(yv.y_of_sigma(sigma)) == pytest.approx(sigma, rel=1e-9)


def test_y_variable_derivative(lsw):
    yv = profiles.YVariable(lsw)
    # dy/dx = 1 / (kappa0 psi - phi), and x = 1 - sigma
    for sigma in (0.5, 0.05, 2e-4, 5e-5):
        h = 1e-6 * sigma
        dy = (yv.y_of_sigma(sigma - h) - yv.y_of_sigma(sigma + h)) / (2 * h)
        phi, psi = lsw.eval(1.0 - sigma)
        assert dy == pytest.approx(1.0 / (2.0 * psi - phi), rel=1e-5)
