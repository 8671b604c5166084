"""Exact reduction of the transport problem for quadratic coefficient pairs.

With ``phi = phi1 x (x - 1)`` and ``psi = psi1 (x - 1) + psi2 (x - 1)^2 / 2``
the characteristic equation is a Riccati equation in ``s = 1 - x``. Its
solution is fixed by two scalars: ``u(t) = exp int (phi1 - psi1 kappa)`` and
``v(t) = int u``. The backward map is then

    1 - F(x, t) = (1 - x) / (u + a (1 - x)),
    a = q (u - 1) + a2 v,

with ``q = psi2 / (2 |psi1|)`` and ``a2 = |phi1| (1 + q)``. Conservation of
``int w`` becomes ``exp(t) G(u, v) = 1`` and closes the system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, special
from scipy.integrate import solve_ivp

from ._quad import integrate_panels
from .coeffs import CoefficientPair
from .errors import DegenerateStateError, DomainError, ParameterError, QuadratureError
from .profiles import Profile

_ORDER = 16
_PANELS = np.concatenate([[0.0], np.geomspace(1e-16, 1.0, 65)])


def _require_quadratic(pair: CoefficientPair) -> None:
    if pair.kind != "quadratic":
        raise ParameterError("the reduced model needs a quadratic pair")


@dataclass(frozen=True)
class QuadraticCoefficients:
    """Constants of the reduction: q (= a1 in the limit system) and a2."""

    phi1: float
    psi1: float
    psi2: float

    @property
    def q(self) -> float:
        return self.psi2 / (2.0 * abs(self.psi1))

    @property
    def a1(self) -> float:
        return self.q

    @property
    def a2(self) -> float:
        return abs(self.phi1) * (self.psi2 - 2.0 * self.psi1) / (2.0 * abs(self.psi1))

    def a_of(self, u, v):
        return self.q * (u - 1.0) + self.a2 * v

    def kappa_from_rate(self, dlnu_dt):
        """Invert d ln u / dt = phi1 - psi1 kappa."""
        return (self.phi1 - dlnu_dt) / self.psi1


def coefficients(pair: CoefficientPair) -> QuadraticCoefficients:
    _require_quadratic(pair)
    return QuadraticCoefficients(pair.phi1, pair.psi1, pair.psi2)


@dataclass(frozen=True)
class QuadraticState:
    t: float
    u: float
    v: float
    kappa: float
    a: float
    residual: float = 0.0  # exp(t) G(u, v) - 1

    @property
    def xi(self) -> float:
        return self.v / self.u

    @property
    def eta(self) -> float:
        return 1.0 / self.u


# -- the conservation functional G(u, v) ---------------------------------------

def _profile_terms(profile: Profile, d: np.ndarray, ln_scale: float = 0.0):
    """exp(ln_scale) w0 and r = d c0 / w0 at distance d from the support end."""
    inside = d > 0.0
    dd = np.where(inside, d, 1.0)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        ln_w = profile.ln_w_d(dd)
        w = np.where(inside, np.exp(ln_w + ln_scale), 0.0)
        r = np.where(inside, np.exp(profile.ln_c0_d(dd) + np.log(dd) - ln_w), 0.0)
    return w, np.nan_to_num(r)


def _sigma_panels(sigma_lo: float) -> np.ndarray:
    return sigma_lo + (1.0 - sigma_lo) * _PANELS


def G_and_partials(profile: Profile, pair: CoefficientPair, u: float, v: float, ln_scale: float = 0.0):
    """(G, G_u, G_v) with G = int_0^1 w0(1 - s / (u + a s)) ds, all times exp(ln_scale).

    The partials are computed under the integral sign from c0 = -w0'.
    Passing ``ln_scale = t`` keeps the values near one when G ~ exp(-t)
    would underflow.
    """
    co = coefficients(pair)
    a = co.a_of(u, v)
    gap = 1.0 - profile.support_end  # labels below this distance carry no mass
    if gap > 0.0:
        denom = 1.0 - gap * a
        if denom <= 0.0:
            return 0.0, 0.0, 0.0
        sigma_lo = gap * u / denom
        if sigma_lo >= 1.0:
            return 0.0, 0.0, 0.0
    else:
        sigma_lo = 0.0
    edges = _sigma_panels(sigma_lo)

    def parts(sig):
        D = u + a * sig
        Z = sig / D
        w, r = _profile_terms(profile, Z - gap, ln_scale)
        # d Z/du = -s (1 + q s) / D^2, d Z/dv = -a2 s^2 / D^2, and c0 = r w / (Z - gap)
        lever = np.where(Z > gap, Z / np.maximum(Z - gap, 1e-300), 0.0)
        rw = r * w * lever
        return w, -rw * (1.0 + co.q * sig) / D, -rw * co.a2 * sig / D

    out = []
    for k in range(3):
        vals = integrate_panels(lambda s, k=k: parts(s)[k], edges, _ORDER).sum()
        out.append(float(vals))
    if not all(math.isfinite(x) for x in out):
        raise QuadratureError("non-finite value in the G quadrature")
    return tuple(out)


# -- the (u, v) dynamical system --------------------------------------------------

@dataclass
class QuadraticSeries:
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kappa: np.ndarray
    residual: np.ndarray
    pair: CoefficientPair
    profile: Profile
    _sol: object = None

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k) -> QuadraticState:
        co = coefficients(self.pair)
        u, v = float(self.u[k]), float(self.v[k])
        return QuadraticState(t=float(self.t[k]), u=u, v=v, kappa=float(self.kappa[k]),
                              a=co.a_of(u, v), residual=float(self.residual[k]))

    def state_at(self, t: float) -> QuadraticState:
        """Dense-output state at any t in the integrated range."""
        if not (self.t[0] - 1e-12 <= t <= self.t[-1] + 1e-12):
            raise DomainError("t outside the integrated range")
        ln_u, xi = self._sol(t)
        u = math.exp(ln_u)
        v = xi * u
        G, Gu, Gv = G_and_partials(self.profile, self.pair, u, v, ln_scale=t)
        co = coefficients(self.pair)
        rate = -(G + Gv * u) / (u * Gu)
        return QuadraticState(t=t, u=u, v=v, kappa=float(co.kappa_from_rate(rate)), a=co.a_of(u, v),
                              residual=G - 1.0)

    def kappa_at(self, t):
        return np.array([self.state_at(float(tt)).kappa for tt in np.atleast_1d(t)])


def _uv_rhs(profile, pair):
    def rhs(t, y):
        ln_u, xi = y
        u = math.exp(ln_u)
        G, Gu, Gv = G_and_partials(profile, pair, u, xi * u, ln_scale=t)
        if not Gu < 0.0:
            raise DegenerateStateError(f"G_u = {Gu:.3e} is not negative at t = {t:.6g}")
        rate = -(G + Gv * u) / (u * Gu)
        return [rate, 1.0 - xi * rate]

    return rhs


def integrate_uv(profile: Profile, pair: CoefficientPair, t_end: float,
                 t_eval: Sequence[float] | None = None, rtol: float = 1e-11) -> QuadraticSeries:
    """Integrate dv/dt = u together with exp(t) G(u, v) = 1.

    Internally the unknowns are ln u and xi = v / u, which stay moderate
    while u and v grow exponentially.
    """
    _require_quadratic(pair)
    if not t_end > 0:
        raise ParameterError("t_end must be positive")
    if t_eval is None:
        t_eval = np.linspace(0.0, t_end, int(round(10 * t_end)) + 1)
    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(_uv_rhs(profile, pair), (0.0, t_end), [0.0, 0.0], method="DOP853",
                    t_eval=t_eval, dense_output=True, rtol=rtol, atol=1e-13)
    if not sol.success:
        raise DegenerateStateError(sol.message)
    co = coefficients(pair)
    u = np.exp(sol.y[0])
    v = sol.y[1] * u
    kappa = np.empty_like(u)
    resid = np.empty_like(u)
    for k, (tk, uk, vk) in enumerate(zip(sol.t, u, v)):
        G, Gu, Gv = G_and_partials(profile, pair, uk, vk, ln_scale=tk)
        kappa[k] = co.kappa_from_rate(-(G + Gv * uk) / (uk * Gu))
        resid[k] = G - 1.0
    return QuadraticSeries(t=sol.t, u=u, v=v, kappa=kappa, residual=resid, pair=pair,
                           profile=profile, _sol=sol.sol)


def closed_form_F(state: QuadraticState, pair: CoefficientPair, x):
    """Label F(x, t) of the characteristic that sits at x at time t."""
    _require_quadratic(pair)
    x = np.asarray(x, dtype=float)
    s = 1.0 - x
    out = 1.0 - s / (state.u + state.a * s)
    return float(out) if out.ndim == 0 else out


# -- the large-time reduction ------------------------------------------------------

def _z_panels():
    return np.concatenate([[0.0], np.geomspace(1e-12, 1.0, 40)])


def G0_eval(xi: float, p: float, pair: CoefficientPair) -> tuple[float, float]:
    """G0(xi) = int_0^1 [s / (1 + s (a1 + a2 xi))]^p ds and its derivative."""
    co = coefficients(pair)
    if xi < 0 or not p > 0:
        raise DomainError("need xi >= 0 and p > 0")
    b = co.a1 + co.a2 * xi

    def f(s):
        return (s / (1.0 + s * b)) ** p

    def df(s):
        # d/dxi [s/(1+sb)]^p = -p a2 s [s/(1+sb)]^p / (1 + s b)
        return -p * co.a2 * s * f(s) / (1.0 + s * b)

    edges = _z_panels()
    return (float(integrate_panels(f, edges, _ORDER).sum()),
            float(integrate_panels(df, edges, _ORDER).sum()))


def lemma_bound(xi: float, p: float, pair: CoefficientPair) -> float:
    """(1 + [psi''(1) + |phi'(1)| (psi''(1) - 2 psi'(1)) xi] / 2|psi'(1)|)^(-p)."""
    co = coefficients(pair)
    return (1.0 + co.a1 + co.a2 * xi) ** (-p)


def lemma_margins(xi: float, p: float, pair: CoefficientPair) -> tuple[float, float]:
    """Margins of the two G0 inequalities; both must be nonnegative.

    First: xi G0' + (p + 1) G0 - bound. Second: bound - G0.
    """
    G0, dG0 = G0_eval(xi, p, pair)
    bound = lemma_bound(xi, p, pair)
    return xi * dG0 + (p + 1.0) * G0 - bound, bound - G0


def limit_rhs(xi: float, p: float, pair: CoefficientPair) -> tuple[float, float]:
    """(d xi/dt, d ln u/dt) once G is replaced by u^-p G0(v/u)."""
    G0, dG0 = G0_eval(xi, p, pair)
    den = p * G0 + xi * dG0
    return (p - xi) * G0 / den, (G0 + dG0) / den


def limit_kappa(p: float, pair: CoefficientPair) -> float:
    """kappa at the fixed point xi = p of the limit system."""
    return coefficients(pair).kappa_from_rate(limit_rhs(p, p, pair)[1])


def _profile_exponent(profile: Profile) -> float:
    b0 = profile.beta0_limit
    if b0 is None or not (0.0 < b0 < 1.0) or profile.support_end < 1.0:
        raise ParameterError("the reduced system needs subcritical data with full support")
    return b0 / (1.0 - b0)


def G0_two(xi: float, eta: float, profile: Profile, pair: CoefficientPair):
    """G0(xi, eta) = u^p G(u, v) and its two partials.

    The integrand is eta^-p w0(Y) with Y = eta z / (1 + z b) the distance
    to x = 1 and b = a1 (1 - eta) + a2 xi. Derivatives use d c0 / w0 = beta d / g.
    """
    co = coefficients(pair)
    p = _profile_exponent(profile)
    if not (0.0 < eta <= 1.0):
        raise DomainError("eta must lie in (0, 1]")
    b = co.a1 * (1.0 - eta) + co.a2 * xi
    ln_eta = math.log(eta)

    def parts(z):
        den = 1.0 + z * b
        Y = eta * z / den
        Ys = np.maximum(Y, 1e-300)
        ln_w = profile.ln_w_d(Ys)
        w = np.where(z > 0, np.exp(ln_w - p * ln_eta), 0.0)
        r = profile.beta_d(Ys) * Ys / profile.g_d(Ys)
        d_xi = -w * r * z * co.a2 / den
        eta_d_eta = w * (r * (1.0 + eta * z * co.a1 / den) - p)
        return w, d_xi, eta_d_eta

    edges = _z_panels()
    vals = [float(integrate_panels(lambda z, k=k: parts(z)[k], edges, _ORDER).sum()) for k in range(3)]
    G0, dxi, eta_deta = vals
    return G0, dxi, eta_deta / eta


def reduced_rhs(xi: float, eta: float, p: float, profile: Profile, pair: CoefficientPair):
    """(d xi/dt, d ln u/dt) in the (xi, eta) variables."""
    G0, dxi, deta = G0_two(xi, eta, profile, pair)
    den = p * G0 + xi * dxi + eta * deta
    if not den > 0:
        raise DegenerateStateError(f"nonpositive denominator {den:.3e} at xi={xi}, eta={eta}")
    return ((p - xi) * G0 + eta * deta) / den, (G0 + dxi) / den


@dataclass
class ReducedSeries:
    t: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    kappa: np.ndarray


def integrate_reduced(profile: Profile, pair: CoefficientPair, t_end: float,
                      t_eval: Sequence[float] | None = None) -> ReducedSeries:
    """Integrate the (xi, ln u) system from xi = 0, u = 1."""
    co = coefficients(pair)
    p = _profile_exponent(profile)
    if t_eval is None:
        t_eval = np.linspace(0.0, t_end, int(round(10 * t_end)) + 1)

    def rhs(t, y):
        xi, ln_u = y
        dxi, rate = reduced_rhs(max(xi, 0.0), math.exp(-ln_u), p, profile, pair)
        return [dxi, rate]

    sol = solve_ivp(rhs, (0.0, t_end), [0.0, 0.0], method="DOP853", t_eval=t_eval, rtol=1e-10, atol=1e-12)
    if not sol.success:
        raise DegenerateStateError(sol.message)
    xi, ln_u = sol.y
    kappa = np.array([co.kappa_from_rate(reduced_rhs(max(a, 0.0), math.exp(-b), p, profile, pair)[1])
                      for a, b in zip(xi, ln_u)])
    return ReducedSeries(t=sol.t, xi=xi, eta=np.exp(-ln_u), kappa=kappa)


# -- critical data ---------------------------------------------------------------

@dataclass(frozen=True)
class CriticalConstants:
    alpha: float
    beta_const: float
    tau0: float
    q: float

    @property
    def limiting_mean(self) -> float:
        return math.exp(self.alpha + self.beta_const - self.tau0)

    def residual(self, tau0: float | None = None) -> float:
        """exp(tau0 - beta) int_0^1 exp(-alpha / (1 - x)) dx - 1."""
        tau0 = self.tau0 if tau0 is None else tau0
        return math.exp(tau0 - self.beta_const) * _exp_tail_integral(self.alpha) - 1.0


def _exp_tail_integral(alpha: float) -> float:
    """int_0^1 exp(-alpha / s) ds by quadrature on log panels in s."""
    edges = np.concatenate([[0.0], np.geomspace(1e-6, 1.0, 60)])
    with np.errstate(under="ignore"):
        return float(integrate_panels(lambda s: np.exp(-alpha / np.maximum(s, 1e-300)), edges, 20).sum())


def critical_constants(pair: CoefficientPair) -> CriticalConstants:
    """alpha = 1/a2, beta = q/a2 from F - y ~ (1/(1-x) + q) dy/dt / a2; tau0 by root finding."""
    co = coefficients(pair)
    alpha = 1.0 / co.a2
    beta = co.q / co.a2
    integral = _exp_tail_integral(alpha)
    guess = beta - math.log(integral)
    tau0 = optimize.brentq(
        lambda tau: math.exp(tau - beta) * integral - 1.0, guess - 5.0, guess + 5.0, xtol=1e-15, rtol=1e-15,
    )
    return CriticalConstants(alpha=alpha, beta_const=beta, tau0=tau0, q=co.q)


def exp_tail_integral_exact(alpha: float) -> float:
    """Closed form E_2(alpha) of the same integral, for cross-checks."""
    return float(special.expn(2, alpha))


def fit_lag_coefficients(state: QuadraticState, pair: CoefficientPair,
                         xs: Sequence[float] = tuple(np.linspace(0.0, 0.9, 19))) -> tuple[float, float]:
    """Regress (F(x, t) - y(t)) / (dy/dt) on 1/(1 - x); returns (slope, intercept)."""
    co = coefficients(pair)
    a1 = co.a2 * state.v - co.q
    if a1 <= 1.0:
        raise DomainError("y(t) is not defined yet at this time")
    y = 1.0 - 1.0 / a1
    dy = co.a2 * state.u / a1**2
    xs = np.asarray(xs, dtype=float)
    lhs = (closed_form_F(state, pair, xs) - y) / dy
    slope, intercept = np.polyfit(1.0 / (1.0 - xs), lhs, 1)
    return float(slope), float(intercept)


def z_of_t(profile: Profile, t: float) -> float:
    """Position z with exp(t) w0(z) = 1; ln w0 is decreasing in z."""
    target = -t

    def f(ln_d):
        return float(profile.ln_w_d(math.exp(ln_d))) - target

    lo, hi = math.log(1e-300), math.log(profile.support_end)
    if f(hi) < 0:
        raise DomainError("exp(t) w0(0) < 1, so no such z exists")
    return profile.support_end - math.exp(optimize.brentq(f, lo, hi, xtol=1e-14))


def critical_track(profile: Profile, pair: CoefficientPair, t_end: float,
                   series: QuadraticSeries | None = None) -> list[dict]:
    """Lag tau(t) between y(t) = 1 - 1/a1(t) and z, plus (dy/dt)/g(y).

    ``y(t) = z(t - tau)`` reduces to ``tau = t + ln w0(y)`` since
    ``ln w0(z(s)) = -s``. Entries with a1 <= 1 are marked inactive.
    """
    co = coefficients(pair)
    if series is None:
        series = integrate_uv(profile, pair, t_end)
    rows = []
    for k in range(len(series)):
        st = series[k]
        a1 = co.a2 * st.v - co.q
        row = {"t": st.t, "active": False, "y": math.nan, "tau": math.nan, "dy_dt_over_g": math.nan,
               "z": math.nan}
        try:
            row["z"] = z_of_t(profile, st.t)
        except DomainError:
            pass
        if a1 > 1.0:
            d = 1.0 / a1
            row.update(active=True, y=1.0 - d,
                       tau=st.t + float(profile.ln_w_d(d)),
                       dy_dt_over_g=co.a2 * st.u / a1**2 / float(profile.g_d(d)))
        rows.append(row)
    return rows
