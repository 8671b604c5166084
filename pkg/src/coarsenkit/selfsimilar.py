"""Time-independent solutions w_kappa of the normalized system.

A stationary profile solves ``(phi - kappa psi) w' = w``. With
``sigma = 1 - x`` and ``kappa psi - phi = sigma E(sigma)`` this reads
``d ln w / d sigma = 1 / (sigma E)``. The pole at sigma = 0 is simple when
kappa > kappa0 (power tail) and double when kappa = kappa0 (exponential
tail); both are integrated in closed form and only a smooth remainder goes
through quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from ._quad import CumulativeIntegral
from .coeffs import CoefficientPair, kappa_zero
from .errors import DomainError, ParameterError
from .profiles import Profile

SIGMA_START = 1e-6
_SERIES_BELOW = 1e-4


def _inverse_series(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Taylor coefficients of 1 / (sum_j coeffs[j] t^j) up to order n - 1."""
    out = np.zeros(n)
    out[0] = 1.0 / coeffs[0]
    for k in range(1, n):
        acc = sum(coeffs[j] * out[k - j] for j in range(1, min(k, len(coeffs) - 1) + 1))
        out[k] = -acc / coeffs[0]
    return out


@dataclass(frozen=True)
class PowerTail:
    p: float


@dataclass(frozen=True)
class ExpTail:
    gamma: float


@dataclass(eq=False)
class SelfSimilarSolution:
    """Normalized stationary solution for a given pair and kappa.

    Attributes ``sigma_table``, ``ln_w_table`` and ``beta_table`` sample the
    solution on a grid clustered at x = 1.
    """

    pair: CoefficientPair
    kappa: float
    critical: bool
    tail: object
    ln_norm: float = 0.0
    sigma_table: np.ndarray = field(default_factory=lambda: np.empty(0))
    ln_w_table: np.ndarray = field(default_factory=lambda: np.empty(0))
    beta_table: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        pair, k = self.pair, self.kappa
        e = k * pair.psi_series - pair.phi_series  # kappa psi - phi = sum e[j] sigma^(j+1)
        if self.critical:
            self.A2, self.A3 = float(e[1]), float(e[2])
            self._r_series = _inverse_series(e[1:], 3)[2:]
        else:
            self.m = float(e[0])
            self._r_series = _inverse_series(e, 4)[1:]
        self._e = e
        edges = _regular_breakpoints()
        self._R = CumulativeIntegral(self._regular, edges, order=16)
        self._solve_g()
        # mass = h(1) = g(1) w(1) = 1
        self.ln_norm = -(self._ln_w_raw(np.array(1.0)) + math.log(self._g(np.array(1.0))))
        self.sigma_table = np.geomspace(1e-12, 1.0, 400)
        self.ln_w_table = self.ln_w_s(self.sigma_table)
        self.beta_table = self.beta_s(self.sigma_table)

    # -- singular and regular parts ---------------------------------------
    def _sigma_e(self, sigma):
        """kappa psi - phi at x = 1 - sigma; the series avoids cancellation at small sigma."""
        sigma = np.asarray(sigma, dtype=float)
        phi, psi = self.pair.phi_psi_s(sigma)
        direct = self.kappa * psi - phi
        series = sigma * np.polynomial.polynomial.polyval(sigma, self._e)
        return np.where(sigma < _SERIES_BELOW, series, direct)

    def _regular(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        small = sigma < _SERIES_BELOW
        sg = np.where(small, 1.0, sigma)
        se = self._sigma_e(sg)
        if self.critical:
            direct = 1.0 / se - 1.0 / (self.A2 * sg**2) + self.A3 / (self.A2**2 * sg)
        else:
            direct = 1.0 / se - 1.0 / (self.m * sg)
        series = np.polynomial.polynomial.polyval(sigma, self._r_series)
        return np.where(small, series, direct)

    def _ln_w_raw(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if self.critical:
            pos = np.where(sigma > 0, sigma, 1.0)
            main = np.where(sigma > 0, -1.0 / (self.A2 * pos) - self.A3 / self.A2**2 * np.log(pos), -np.inf)
        else:
            main = np.log(sigma) / self.m
        return main + self._R(sigma)

    # -- g = h / w ---------------------------------------------------------
    def _g_start(self, sigma):
        if self.critical:
            return self.A2 * sigma**2 + (self.A3 - 2.0 * self.A2**2) * sigma**3
        m, e1 = self.m, float(self._e[1])
        c1 = m / (m + 1.0)
        c2 = c1 * e1 / (m * (2.0 * m + 1.0))
        return c1 * sigma + c2 * sigma**2

    def _solve_g(self):
        # dg/d(ln sigma) = sigma - g / E; implicit because 1/E ~ 1/sigma at kappa0
        phi_s, psi_s, kappa = self.pair.phi_s, self.pair.psi_s, self.kappa

        def inv_e(ell):
            sigma = math.exp(ell)
            return sigma / (kappa * float(psi_s(sigma)) - float(phi_s(sigma))), sigma

        def rhs(ell, y):
            r, sigma = inv_e(ell)
            return [sigma - y[0] * r]

        def jac(ell, y):
            return [[-inv_e(ell)[0]]]

        self._g_sol = solve_ivp(
            rhs, (math.log(SIGMA_START), 0.0), [self._g_start(SIGMA_START)],
            method="Radau", jac=jac, rtol=1e-10, atol=1e-300, dense_output=True,
        )
        if not self._g_sol.success:
            raise ParameterError(f"g integration failed: {self._g_sol.message}")

    def _g(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        small = sigma < SIGMA_START
        ell = np.log(np.clip(sigma, SIGMA_START, 1.0))
        vals = self._g_sol.sol(np.atleast_1d(ell).ravel())[0].reshape(np.shape(ell))
        return np.where(small, self._g_start(sigma), vals)

    # -- public accessors in sigma -------------------------------------------
    def ln_w_s(self, sigma):
        return self.ln_norm + self._ln_w_raw(sigma)

    def g_s(self, sigma):
        return self._g(sigma)

    def beta_s(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return self._g(sigma) / self._sigma_e(sigma)

    def ln_c_s(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return self.ln_w_s(sigma) - np.log(self._sigma_e(sigma))

    # -- public accessors in x -------------------------------------------------
    def _sigma_of_x(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x >= 1.0):
            raise DomainError("x must lie in [0, 1)")
        return 1.0 - x

    def ln_w(self, x):
        return _scalar(self.ln_w_s(self._sigma_of_x(x)), x)

    def w(self, x):
        return _scalar(np.exp(self.ln_w_s(self._sigma_of_x(x))), x)

    def beta_at(self, x):
        return _scalar(self.beta_s(self._sigma_of_x(x)), x)

    @property
    def beta_limit(self) -> float:
        """beta_kappa at x -> 1."""
        if self.critical:
            return 1.0
        return 1.0 / (self.m + 1.0)

    def as_profile(self) -> "SelfSimilarProfile":
        return SelfSimilarProfile(solution=self)

    def mass(self) -> float:
        return self.as_profile().mass()


def _regular_breakpoints() -> np.ndarray:
    near_one = 1.0 - np.geomspace(1e-14, 0.5, 30)
    return np.unique(np.concatenate([[0.0], np.geomspace(1e-8, 0.5, 30), near_one, [1.0]]))


def _scalar(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return np.asarray(value, dtype=float)


@dataclass(frozen=True, eq=False)
class SelfSimilarProfile(Profile):
    """A stationary solution viewed as initial data."""

    solution: SelfSimilarSolution = None
    kind = "self_similar"

    @property
    def params(self):
        return {"kappa": self.solution.kappa, "pair": self.solution.pair.describe()}

    @property
    def beta0_limit(self):
        return self.solution.beta_limit

    def _ln_shape(self, d):
        return self.solution.ln_w_s(d)

    def g_d(self, d):
        return self.solution.g_s(d)

    def beta_d(self, d):
        return self.solution.beta_s(d)

    def ln_c0_d(self, d):
        return self.ln_norm + self.solution.ln_c_s(np.asarray(d, dtype=float))


def build_selfsimilar(pair: CoefficientPair, kappa: float) -> SelfSimilarSolution:
    """Stationary solution with parameter ``kappa >= kappa0``."""
    k0 = kappa_zero(pair)
    kappa = float(kappa)
    if kappa < k0 - 1e-12 * max(1.0, abs(k0)):
        raise ParameterError(f"kappa = {kappa} lies below kappa0 = {k0}")
    critical = abs(kappa - k0) <= 1e-12 * max(1.0, abs(k0))
    if critical:
        if not pair.psi2 - pair.phi2 > 0:
            raise ParameterError("the critical solution needs psi''(1) > phi''(1)")
        kappa = k0
        tail = ExpTail(gamma=kappa * pair.psi2 - pair.phi2)
    else:
        tail = PowerTail(p=1.0 / ((kappa - k0) * abs(pair.psi1)))
    return SelfSimilarSolution(pair=pair, kappa=kappa, critical=critical, tail=tail)


def tail_exponent_check(sol: SelfSimilarSolution, window=(1e-6, 1e-3), n: int = 60) -> float:
    """Fit the tail parameter from the tabulated solution.

    Power tails return the slope of ln w against ln(1 - x). Exponential
    tails return gamma from ln w ~ -2 / (gamma (1 - x)).
    """
    sigma = np.geomspace(window[0], window[1], n)
    ln_w = sol.ln_w_s(sigma)
    if sol.critical:
        slope = np.polyfit(1.0 / sigma, ln_w, 1)[0]
        return -2.0 / slope
    return float(np.polyfit(np.log(sigma), ln_w, 1)[0])


def beta_kappa_at(sol: SelfSimilarSolution, x):
    return sol.beta_at(x)


def quadratic_closed_form_ln_w(pair: CoefficientPair, kappa: float, x) -> np.ndarray:
    """Unnormalized ln w_kappa for a quadratic pair, in closed form.

    For kappa > kappa0: p ln[sigma / (1 + sigma (a1 + p a2))]; at kappa0:
    -1 / (a2 sigma), with a1 = psi''(1)/(2|psi'(1)|) and
    a2 = |phi'(1)| (psi''(1) + 2|psi'(1)|) / (2|psi'(1)|).
    """
    if pair.kind != "quadratic":
        raise ParameterError("closed form exists for quadratic pairs only")
    sigma = 1.0 - np.asarray(x, dtype=float)
    a1 = pair.psi2 / (2.0 * abs(pair.psi1))
    a2 = abs(pair.phi1) * (pair.psi2 + 2.0 * abs(pair.psi1)) / (2.0 * abs(pair.psi1))
    k0 = kappa_zero(pair)
    if abs(kappa - k0) <= 1e-12:
        return -1.0 / (a2 * sigma)
    p = 1.0 / ((kappa - k0) * abs(pair.psi1))
    return p * np.log(sigma / (1.0 + sigma * (a1 + p * a2)))
