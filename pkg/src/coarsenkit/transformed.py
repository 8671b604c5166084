"""Change of variables that straightens the characteristics near x = 1.

``f`` solves ``d ln f / dx = -psi'(1) / psi(x)`` with ``(1 - x) f(x) -> 1``
as ``x -> 1``. In the variable ``z = f(x) u(t)`` the characteristic flow
has velocity ``g(z, u)``, and ``Gamma(x) = dg/dz`` at ``z = f(x) u``.
For quadratic pairs ``f = 1/(1 - x) + q``, ``Gamma`` vanishes and the flow
in z is a pure shift by ``alpha0 v(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from ._quad import CumulativeIntegral
from .coeffs import SERIES_SWITCH, CoefficientPair, gamma_expr
from .errors import DomainError, ParameterError

def alpha0(pair: CoefficientPair) -> float:
    """-[psi'(1) phi''(1) - psi''(1) phi'(1)] / (2 psi'(1)); the slope of -g/u at z -> infinity."""
    return -(pair.psi1 * pair.phi2 - pair.psi2 * pair.phi1) / (2.0 * pair.psi1)


@dataclass(eq=False)
class TransformTables:
    """f, its inverse k, g(z, u) and Gamma for one pair."""

    pair: CoefficientPair

    def __post_init__(self):
        if not self.pair.psi1 < 0:
            raise ParameterError("need psi'(1) < 0")
        self.abs_psi1 = abs(self.pair.psi1)
        breaks = np.unique(np.concatenate([
            [0.0], np.geomspace(1e-14, 0.5, 45), 1.0 - np.geomspace(1e-14, 0.5, 45), [1.0],
        ]))
        self._R = CumulativeIntegral(self._log_regular, breaks, order=16)

    # -- f and its inverse -----------------------------------------------------
    def _log_regular(self, s):
        """|psi'(1)| / psi(1 - s) - 1/s, written without cancellation."""
        s = np.asarray(s, dtype=float)
        _, r = self.pair.rates(s)  # psi(1 - s) / s
        b = self.pair.psi_series
        small = s < SERIES_SWITCH
        tail = np.polynomial.polynomial.polyval(s, b[1:])  # (r - |psi1|) / s
        direct = (r - self.abs_psi1) / np.where(small, 1.0, s)
        return -np.where(small, tail, direct) / r

    def ln_f_s(self, sigma):
        """ln f at x = 1 - sigma."""
        sigma = np.asarray(sigma, dtype=float)
        return -np.log(sigma) - self._R(sigma)

    def f(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x >= 1.0):
            raise DomainError("f is defined on [0, 1)")
        out = np.exp(self.ln_f_s(1.0 - x))
        return float(out) if out.ndim == 0 else out

    def df(self, x):
        """f'(x) = f(x) |psi'(1)| / psi(x)."""
        x = np.asarray(x, dtype=float)
        _, psi = self.pair.phi_psi_s(1.0 - x)
        return self.f(x) * self.abs_psi1 / psi

    @cached_property
    def f0(self) -> float:
        return float(self.f(0.0))

    def sigma_of_f(self, z: float) -> float:
        """1 - k(z), solved in ln(1 - x) so that tiny distances keep full precision."""
        z = float(z)
        if z < self.f0 * (1.0 - 1e-14):
            raise DomainError(f"z = {z} lies below f(0) = {self.f0}")
        if z <= self.f0:
            return 1.0
        target = math.log(z)
        lo = max(-740.0, -target - 50.0)

        def h(L):
            return float(self.ln_f_s(math.exp(L))) - target

        return math.exp(optimize.brentq(h, lo, 0.0, xtol=1e-15, rtol=1e-15))

    def k(self, z):
        """Inverse of f."""
        if np.ndim(z) == 0:
            return 1.0 - self.sigma_of_f(z)
        return np.array([1.0 - self.sigma_of_f(v) for v in np.ravel(z)]).reshape(np.shape(z))

    # -- velocity field in z ---------------------------------------------------
    def _g_over_u_s(self, sigma: float) -> float:
        """f(x) (phi'(1) - psi'(1) phi/psi) at x = 1 - sigma."""
        pair = self.pair
        if sigma < SERIES_SWITCH:
            a, b = pair.phi_series, pair.psi_series
            m = min(len(a), len(b))
            # phi1 psi - psi1 phi = sigma^2 sum_{j>=1} (phi1 b_j - psi1 a_j) sigma^(j-1)
            c = np.array([pair.phi1 * b[j] - pair.psi1 * a[j] for j in range(1, m)])
            num = float(np.polynomial.polynomial.polyval(sigma, c))
            fs = math.exp(float(self.ln_f_s(sigma)) + math.log(sigma))  # f * sigma
            r = float(pair.rates(np.array(sigma))[1])
            return fs * num / r
        phi, psi = pair.phi_psi_s(np.array(sigma))
        return math.exp(float(self.ln_f_s(sigma))) * (pair.phi1 - pair.psi1 * float(phi) / float(psi))

    def g_zu(self, z: float, u: float) -> float:
        if not u > 0:
            raise DomainError("u must be positive")
        if z < self.f0 * u * (1.0 - 1e-14):
            raise DomainError("z must be at least f(0) u")
        return u * self._g_over_u_s(self.sigma_of_f(z / u))

    def gamma(self, x):
        """phi'(x) + phi'(1) - phi(x) [psi'(x) + psi'(1)] / psi(x)."""
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0.0) or np.any(xa > 1.0):
            raise DomainError("x must lie in (0, 1]")
        if np.any(xa == 0.0) and self.pair.phi_superlinear_at_0:
            raise DomainError("phi'(0) diverges, so Gamma(0) is not finite")
        return gamma_expr(self.pair, xa)


def tables(pair: CoefficientPair) -> TransformTables:
    return TransformTables(pair)


def f_at(pair: CoefficientPair, x):
    return TransformTables(pair).f(x)


def g_zu_at(pair: CoefficientPair, z: float, u: float) -> float:
    return TransformTables(pair).g_zu(z, u)


def gamma_at(pair: CoefficientPair, x):
    return TransformTables(pair).gamma(x)


def sandwich_constants(tab: TransformTables, zs: Sequence[float], us: Sequence[float]) -> tuple[float, float]:
    """(C1, C2) with -C2 u <= g(z, u) <= -C1 u over the grid of z >= f(0) u."""
    ratios = [-tab.g_zu(z, u) / u for z in zs for u in us if z >= tab.f0 * u]
    if not ratios:
        raise DomainError("no admissible (z, u) pairs in the grid")
    return min(ratios), max(ratios)


# -- the identity f(F(x, t)) = f(x) u(t) + alpha0 v(t) ------------------------------

def uv_from_kappa(pair: CoefficientPair, kappa_t, kappa_v, t: float, kappa_shift: float = 0.0):
    """u(t) = exp int (phi'(1) - psi'(1) kappa) and v(t) = int u, from a kappa history.

    ``kappa_shift`` adds a lump of kappa-time to the final ln u.
    """
    kt = np.asarray(kappa_t, dtype=float)
    spline = CubicSpline(kt, np.asarray(kappa_v, dtype=float))
    if t == 0.0:
        return 1.0, 0.0

    def rhs(tt, y):
        return [float(spline(tt)), math.exp(pair.phi1 * tt - pair.psi1 * y[0])]

    sol = solve_ivp(rhs, (0.0, t), [0.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                    t_eval=[t], max_step=0.05)
    K, v = sol.y[:, -1]
    return math.exp(pair.phi1 * t - pair.psi1 * (K + kappa_shift)), float(v)


def cross_check_P6(state, pair: CoefficientPair, x_probes: Sequence[float]) -> float:
    """Max over probes of |F(x, t) - k(f(x) u(t) + alpha0 v(t))|.

    ``state`` is either a reduced-model state (closed-form F, its own u and v)
    or a characteristic state (F read off the nodes, u and v rebuilt from the
    recorded kappa history). Both sides are labels in [0, 1].
    """
    from . import charsolve, quadmodel

    tab = TransformTables(pair)
    a0 = alpha0(pair)
    xs = np.asarray(x_probes, dtype=float)
    if isinstance(state, quadmodel.QuadraticState):
        u, v = state.u, state.v
        F = np.atleast_1d(quadmodel.closed_form_F(state, pair, xs))
    elif isinstance(state, charsolve.CharacteristicState):
        if state.t == 0.0:
            u, v = 1.0, 0.0
        else:
            u, v = uv_from_kappa(pair, state.kappa_t, state.kappa_v, state.t, state.mass_shift)
        F = charsolve.labels_at(state, pair, xs)
    else:
        raise ParameterError("unsupported state type")
    rhs = np.array([1.0 - tab.sigma_of_f(float(tab.f(x)) * u + a0 * v) for x in xs])
    return float(np.max(np.abs(F - rhs)))
