"""Coefficient pairs (phi, psi) for the transport equation.

The velocity field of the equation is ``phi(x) - kappa * psi(x)`` on [0, 1).
Everything downstream resolves a boundary layer at x = 1, so each pair can
also be evaluated in the coordinate ``s = 1 - x`` with full relative accuracy
for arbitrarily small ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import CapabilityError, DomainError, ParameterError

SERIES_SWITCH = 1e-4
"""Below this ``s`` the boundary series replaces direct evaluation."""

SERIES_TERMS = 4

ArrayFn = Callable[[np.ndarray], np.ndarray]


def _series_eval(coeffs: np.ndarray, s: np.ndarray, order: int) -> np.ndarray:
    """Evaluate ``sum_k coeffs[k-1] s^k`` (or its s-derivatives) by Horner."""
    c = np.asarray(coeffs, dtype=float)
    if order == 0:
        poly = np.concatenate([[0.0], c])
    else:
        poly = np.polynomial.polynomial.polyder(np.concatenate([[0.0], c]), order)
    return np.polynomial.polynomial.polyval(s, poly)


def _series_over_s(coeffs: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``(sum_k c_k s^k) / s`` without dividing, so it survives s ~ 1e-300."""
    return np.polynomial.polynomial.polyval(s, np.asarray(coeffs, dtype=float))


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of :func:`validate_conditions`.

    ``checks`` maps an individual condition to pass/fail; ``groups`` bundles
    them into the four structural requirements used by the theory.
    """

    checks: dict
    details: dict = field(default_factory=dict)

    GROUPS = {
        "phi_conditions": ("phi_endpoints", "phi_slope_range", "phi_concave"),
        "psi_conditions": ("psi_endpoint", "psi_slope_negative", "curvature_gap", "psi_convex"),
        "third_order": ("phi_third_nonneg", "psi_third_nonpos"),
        "gamma_decreasing": ("gamma_decreasing",),
    }

    @property
    def groups(self) -> dict:
        return {name: all(self.checks[c] for c in members) for name, members in self.GROUPS.items()}

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    """An admissible pair (phi, psi) with derivatives and boundary series.

    Use :func:`lsw`, :func:`quadratic`, :func:`custom` or :func:`from_config`
    rather than calling the constructor directly.
    """

    kind: str
    params: dict
    phi_x: tuple
    psi_x: tuple
    phi_s: ArrayFn
    psi_s: ArrayFn
    phi_series: np.ndarray
    psi_series: np.ndarray
    c2_on_closed_interval: bool
    phi_superlinear_at_0: bool

    # -- boundary data ---------------------------------------------------
    @property
    def max_order(self) -> int:
        return min(len(self.phi_x), len(self.psi_x)) - 1

    @property
    def phi1(self) -> float:
        return -float(self.phi_series[0])

    @property
    def psi1(self) -> float:
        return -float(self.psi_series[0])

    @property
    def phi2(self) -> float:
        return 2.0 * float(self.phi_series[1])

    @property
    def psi2(self) -> float:
        return 2.0 * float(self.psi_series[1])

    @property
    def phi0_slope(self) -> float:
        """phi'(0), infinite when phi is superlinear at the origin."""
        if self.phi_superlinear_at_0:
            return math.inf
        return float(self.phi_x[1](np.array(0.0)))

    @property
    def psi_at_zero(self) -> float:
        return float(self.psi_s(np.array(1.0)))

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params}

    # -- evaluation ------------------------------------------------------
    def eval(self, x, order: int = 0):
        """Return ``(phi^(order)(x), psi^(order)(x))`` for x in (0, 1]."""
        if order < 0 or order > 3:
            raise ParameterError(f"order must be 0..3, got {order}")
        if order > self.max_order:
            raise CapabilityError(f"{self.kind} pair provides derivatives up to order {self.max_order}")
        xa = np.asarray(x, dtype=float)
        if np.any(~(xa > 0.0)) or np.any(xa > 1.0):
            raise DomainError("x must lie in (0, 1]")
        return _maybe_scalar(self.phi_x[order](xa), xa), _maybe_scalar(self.psi_x[order](xa), xa)

    def eval_in_s(self, s, order: int = 0):
        """Return ``d^order/ds^order`` of ``(phi(1-s), psi(1-s))`` for s in (0, 1]."""
        if order < 0 or order > 2:
            raise ParameterError(f"order must be 0..2, got {order}")
        sa = np.asarray(s, dtype=float)
        if np.any(~(sa > 0.0)) or np.any(sa > 1.0):
            raise DomainError("s must lie in (0, 1]")
        p, q = self._eval_s(sa, order)
        return _maybe_scalar(p, sa), _maybe_scalar(q, sa)

    def _eval_s(self, s: np.ndarray, order: int):
        small = s < SERIES_SWITCH
        if order == 0:
            p = self.phi_s(np.where(small, SERIES_SWITCH, s))
            q = self.psi_s(np.where(small, SERIES_SWITCH, s))
        else:
            x = 1.0 - np.where(small, SERIES_SWITCH, s)
            sign = -1.0 if order % 2 else 1.0
            p = sign * self.phi_x[order](x)
            q = sign * self.psi_x[order](x)
        if np.any(small):
            p = np.where(small, _series_eval(self.phi_series, s, order), p)
            q = np.where(small, _series_eval(self.psi_series, s, order), q)
        return p, q

    def rates(self, s):
        """``(phi(1-s)/s, psi(1-s)/s)``; finite and accurate as s -> 0."""
        s = np.asarray(s, dtype=float)
        small = s < SERIES_SWITCH
        safe = np.where(small, 1.0, s)
        p = self.phi_s(safe) / safe
        q = self.psi_s(safe) / safe
        if np.any(small):
            p = np.where(small, _series_over_s(self.phi_series, s), p)
            q = np.where(small, _series_over_s(self.psi_series, s), q)
        return p, q

    def phi_psi_s(self, s):
        """Unchecked ``(phi(1-s), psi(1-s))`` for internal hot loops."""
        return self._eval_s(np.asarray(s, dtype=float), 0)

    def slopes_x(self, x):
        """Unchecked ``(phi'(x), psi'(x))``."""
        x = np.asarray(x, dtype=float)
        return self.phi_x[1](x), self.psi_x[1](x)

    def kappa_zero(self) -> float:
        return kappa_zero(self)


def _maybe_scalar(value, like):
    value = np.asarray(value, dtype=float)
    if np.ndim(like) == 0:
        return float(value)
    return np.broadcast_to(value, np.shape(like)).copy()


def _series_from_derivatives(derivs_at_one: Sequence[float]) -> np.ndarray:
    """Coefficients of f(1-s) = sum_k (-1)^k f^(k)(1) s^k / k!."""
    return np.array([(-1) ** k * d / math.factorial(k) for k, d in enumerate(derivs_at_one) if k >= 1])


# -- constructors -----------------------------------------------------------

def lsw() -> CoefficientPair:
    """phi = x^(1/3) - x, psi = 1 - x^(1/3)."""
    cbrt = np.cbrt

    phi_x = (
        lambda x: cbrt(x) - x,
        lambda x: 1.0 / (3.0 * cbrt(x) ** 2) - 1.0,
        lambda x: -2.0 / (9.0 * cbrt(x) ** 5),
        lambda x: 10.0 / (27.0 * cbrt(x) ** 8),
    )
    psi_x = (
        lambda x: 1.0 - cbrt(x),
        lambda x: -1.0 / (3.0 * cbrt(x) ** 2),
        lambda x: 2.0 / (9.0 * cbrt(x) ** 5),
        lambda x: -10.0 / (27.0 * cbrt(x) ** 8),
    )

    def psi_s(s):
        with np.errstate(divide="ignore"):
            return -np.expm1(np.log1p(-s) / 3.0)

    def phi_s(s):
        return s - psi_s(s)

    # (1-s)^(1/3) = 1 - s/3 - s^2/9 - 5 s^3/81 - 10 s^4/243 - ...
    root = np.array([-1.0 / 3.0, -1.0 / 9.0, -5.0 / 81.0, -10.0 / 243.0])
    psi_series = -root
    phi_series = root.copy()
    phi_series[0] += 1.0
    return CoefficientPair(
        kind="lsw",
        params={},
        phi_x=phi_x,
        psi_x=psi_x,
        phi_s=phi_s,
        psi_s=psi_s,
        phi_series=phi_series,
        psi_series=psi_series,
        c2_on_closed_interval=False,
        phi_superlinear_at_0=True,
    )


def quadratic(phi1: float, psi1: float, psi2: float) -> CoefficientPair:
    """phi = phi1 x (x - 1), psi = psi1 (x - 1) + psi2 (x - 1)^2 / 2."""
    phi1, psi1, psi2 = float(phi1), float(psi1), float(psi2)
    if not all(math.isfinite(v) for v in (phi1, psi1, psi2)):
        raise ParameterError("quadratic parameters must be finite")

    phi_x = (
        lambda x: phi1 * x * (x - 1.0),
        lambda x: phi1 * (2.0 * x - 1.0),
        lambda x: np.full_like(np.asarray(x, dtype=float), 2.0 * phi1),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    )
    psi_x = (
        lambda x: psi1 * (x - 1.0) + 0.5 * psi2 * (x - 1.0) ** 2,
        lambda x: psi1 + psi2 * (x - 1.0),
        lambda x: np.full_like(np.asarray(x, dtype=float), psi2),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    )
    return CoefficientPair(
        kind="quadratic",
        params={"phi1": phi1, "psi1": psi1, "psi2": psi2},
        phi_x=phi_x,
        psi_x=psi_x,
        phi_s=lambda s: -phi1 * s * (1.0 - s),
        psi_s=lambda s: -psi1 * s + 0.5 * psi2 * s * s,
        phi_series=np.array([-phi1, phi1, 0.0, 0.0]),
        psi_series=np.array([-psi1, 0.5 * psi2, 0.0, 0.0]),
        c2_on_closed_interval=True,
        phi_superlinear_at_0=False,
    )


def custom(
    phi: Sequence[ArrayFn],
    psi: Sequence[ArrayFn],
    *,
    phi_s: ArrayFn | None = None,
    psi_s: ArrayFn | None = None,
    c2_on_closed_interval: bool = False,
    phi_superlinear_at_0: bool = False,
    name: str = "custom",
) -> CoefficientPair:
    """Pair from user closures ``phi[k]``, ``psi[k]`` giving the k-th derivative.

    At least orders 0..2 are required. Boundary series are built from the
    derivatives at x = 1; pass ``phi_s``/``psi_s`` when ``phi(1 - s)`` can be
    evaluated without cancellation.
    """
    if len(phi) < 3 or len(psi) < 3:
        raise ParameterError("custom pairs need derivatives up to order 2")
    one = np.array(1.0)
    phi_d = [float(f(one)) for f in phi]
    psi_d = [float(f(one)) for f in psi]
    return CoefficientPair(
        kind="custom",
        params={"name": name},
        phi_x=tuple(phi),
        psi_x=tuple(psi),
        phi_s=phi_s or (lambda s: phi[0](1.0 - s)),
        psi_s=psi_s or (lambda s: psi[0](1.0 - s)),
        phi_series=_series_from_derivatives(phi_d),
        psi_series=_series_from_derivatives(psi_d),
        c2_on_closed_interval=c2_on_closed_interval,
        phi_superlinear_at_0=phi_superlinear_at_0,
    )


def from_config(cfg: dict) -> CoefficientPair:
    """Build a pair from ``{"kind": "lsw"}`` or ``{"kind": "quadratic", ...}``."""
    from .errors import ConfigError

    kind = str(cfg.get("kind", "")).lower()
    if kind == "lsw":
        return lsw()
    if kind == "quadratic":
        try:
            return quadratic(cfg["phi1"], cfg["psi1"], cfg["psi2"])
        except KeyError as exc:
            raise ConfigError(f"quadratic pair is missing {exc.args[0]!r}") from None
    raise ConfigError(f"unknown pair kind {cfg.get('kind')!r}")


# -- derived quantities -----------------------------------------------------

def kappa_zero(pair: CoefficientPair) -> float:
    """Smallest parameter admitting a stationary profile: phi'(1)/psi'(1)."""
    return pair.phi1 / pair.psi1


def kappa_upper_bound(pair: CoefficientPair, delta: float, n: int = 2001) -> float:
    """Bound on <X + phi(X)> / <psi(X)> for any X on [0, 1] with <X> <= 1 - delta.

    By Jensen, the numerator is at most 1 - delta + sup phi over [0, 1 - delta]
    and the denominator at least psi(1 - delta).
    """
    if not 0.0 < delta < 1.0:
        raise ParameterError("delta must lie in (0, 1)")
    m = 1.0 - delta
    xs = np.linspace(0.0, m, n)
    phi = pair.phi_s(1.0 - xs)
    i = int(np.argmax(phi))
    lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, n - 1)]
    res = optimize.minimize_scalar(lambda x: -float(pair.phi_s(1.0 - x)), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    sup_phi = max(float(phi[i]), -float(res.fun))
    return (m + sup_phi) / float(pair.psi_s(np.array(delta)))


def gamma_expr(pair: CoefficientPair, x) -> np.ndarray:
    """phi'(x) + phi'(1) - phi(x) [psi'(x) + psi'(1)] / psi(x).

    Near x = 1 the expression is O((1-x)^2) and is formed from the boundary
    series to avoid cancellation.
    """
    x = np.asarray(x, dtype=float)
    s = 1.0 - x
    near = s < 1e-4
    xs = np.where(near, 0.5, x)
    phi_d, psi_d = pair.phi_x[1](xs), pair.psi_x[1](xs)
    ph, ps = pair.phi_s(1.0 - xs), pair.psi_s(1.0 - xs)
    out = phi_d + pair.phi1 - ph * (psi_d + pair.psi1) / ps
    if np.any(near):
        out = np.where(near, _gamma_series(pair, s), out)
    return out if out.ndim else float(out)


def _gamma_series(pair: CoefficientPair, s):
    P = np.polynomial.polynomial
    a = np.concatenate([[0.0], pair.phi_series])
    b = np.concatenate([[0.0], pair.psi_series])
    # phi'(1-s) = -d/ds phi(1-s); same for psi.
    dphi = -P.polyder(a)
    dpsi = -P.polyder(b)
    num = P.polysub(
        P.polymul(P.polyadd(dphi, [pair.phi1]), b),
        P.polymul(a, P.polyadd(dpsi, [pair.psi1])),
    )
    num = np.concatenate([num, np.zeros(max(0, 4 - len(num)))])
    num[:3] = 0.0  # orders s^0..s^2 cancel identically
    return P.polyval(s, num[1:]) / P.polyval(s, b[1:])


def clustered_grid(n: int) -> np.ndarray:
    """Interior points of [0, 1] clustered towards both ends (Chebyshev-like)."""
    k = np.arange(1, n + 1)
    return 0.5 * (1.0 - np.cos(np.pi * k / (n + 1)))


def validate_conditions(pair: CoefficientPair, n_samples: int = 64, tol: float = 1e-10) -> ConditionReport:
    """Sampled check of the structural conditions imposed on (phi, psi)."""
    if n_samples < 8:
        raise ParameterError("n_samples must be at least 8")
    checks: dict = {}
    details: dict = {}

    phi_at_1, psi_at_1 = pair.phi_x[0](np.array(1.0)), pair.psi_x[0](np.array(1.0))
    phi_at_0 = float(pair.phi_s(np.array(1.0)))
    checks["phi_endpoints"] = abs(phi_at_0) <= tol and abs(float(phi_at_1)) <= tol
    checks["phi_slope_range"] = -1.0 < pair.phi1 < 0.0
    checks["psi_endpoint"] = abs(float(psi_at_1)) <= tol
    checks["psi_slope_negative"] = pair.psi1 < 0.0
    gap = pair.psi2 - pair.phi2
    details["curvature_gap"] = gap
    checks["curvature_gap"] = gap > 0.0

    x = clustered_grid(n_samples)
    phi_v, psi_v = pair.phi_s(1.0 - x), pair.psi_s(1.0 - x)
    checks["phi_concave"] = _second_differences(x, phi_v).max() <= tol
    checks["psi_convex"] = _second_differences(x, psi_v).min() >= -tol
    details["positive_interior"] = bool(np.all(phi_v > 0) and np.all(psi_v > 0))

    if pair.max_order >= 3:
        checks["phi_third_nonneg"] = bool(np.all(pair.phi_x[3](x) >= -tol))
        checks["psi_third_nonpos"] = bool(np.all(pair.psi_x[3](x) <= tol))
    else:
        checks["phi_third_nonneg"] = False
        checks["psi_third_nonpos"] = False
        details["third_order"] = "pair does not provide third derivatives"

    g = gamma_expr(pair, x)
    scale = max(1.0, float(np.max(np.abs(g))))
    checks["gamma_decreasing"] = bool(np.all(np.diff(g) <= tol * scale))
    return ConditionReport(checks={k: bool(v) for k, v in checks.items()}, details=details)


def _second_differences(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Divided second differences on a non-uniform grid, scaled to O(f'')."""
    h0 = x[1:-1] - x[:-2]
    h1 = x[2:] - x[1:-1]
    return 2.0 * ((f[2:] - f[1:-1]) / h1 - (f[1:-1] - f[:-2]) / h0) / (h0 + h1)
