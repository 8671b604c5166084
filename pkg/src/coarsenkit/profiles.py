"""Initial data w0 for the transport equation.

Every profile is stored through closed forms in the distance to the end of
its support, ``d = b - x``. Working in ``d`` keeps ``ln w0``, the beta
function and ``g = h0 / w0`` accurate when ``d`` is far below machine
epsilon relative to 1, which the characteristic solver needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, special

from ._quad import integrate_panels
from .coeffs import CoefficientPair, kappa_zero
from .errors import ConfigError, DomainError, ParameterError

_ASYMPTOTIC_SWITCH = 50.0


def scaled_e2(X) -> np.ndarray:
    """``exp(X) * E_2(X)`` for X > 0 without overflow or underflow."""
    X = np.asarray(X, dtype=float)
    big = X >= _ASYMPTOTIC_SWITCH
    small_x = np.where(big, 1.0, X)
    with np.errstate(over="ignore", under="ignore"):
        direct = special.expn(2, small_x) * np.exp(small_x)
    if np.any(big):
        Xb = np.where(big, X, _ASYMPTOTIC_SWITCH)
        term = np.ones_like(Xb)
        total = np.ones_like(Xb)
        for k in range(1, 21):
            term = term * (-(k + 1) / Xb)
            total = total + term
        direct = np.where(big, total / Xb, direct)
    return direct


@dataclass(frozen=True)
class Profile:
    """Initial datum w0 with analytic accessors.

    Subclasses implement ``_ln_shape``, ``g_d`` and ``beta_d`` as functions
    of ``d = support_end - x``. ``ln_norm`` is the log of the multiplier that
    makes the mass equal to one.
    """

    ln_norm: float = field(default=0.0, kw_only=True)

    kind = "abstract"
    support_end = 1.0
    beta0_limit = None  # boundary limit of beta(x, 0) when known

    # -- shape, implemented per kind ---------------------------------------
    def _ln_shape(self, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def g_d(self, d) -> np.ndarray:
        raise NotImplementedError

    def beta_d(self, d) -> np.ndarray:
        raise NotImplementedError

    def breakpoints_d(self) -> list[float]:
        """Values of d where the closed form switches branch."""
        return []

    @property
    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"kind": self.kind, **self.params}

    # -- accessors in d -----------------------------------------------------
    def ln_w_d(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return self.ln_norm + self._ln_shape(d)

    def ln_w_ratio_d(self, d_ref: float, u) -> np.ndarray:
        """ln w0 at d = d_ref + u minus ln w0 at d_ref."""
        u = np.asarray(u, dtype=float)
        return self.ln_w_d(d_ref + u) - self.ln_w_d(d_ref)

    def ln_c0_d(self, d) -> np.ndarray:
        """log of the density c0 = -w0'. Uses c0 = beta * w0 / g."""
        d = np.asarray(d, dtype=float)
        with np.errstate(divide="ignore"):
            return self.ln_w_d(d) + np.log(self.beta_d(d)) - np.log(self.g_d(d))

    # -- accessors in x -----------------------------------------------------
    def _to_d(self, x, allow_end: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b = self.support_end
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("x must lie in [0, 1]")
        if not allow_end and np.any(x >= b):
            raise DomainError(f"x must lie in [0, {b}) where w0 is positive")
        return b - x

    def ln_w0(self, x):
        x = np.asarray(x, dtype=float)
        d = self._to_d(x, allow_end=True)
        with np.errstate(divide="ignore"):
            out = np.where(d > 0, self.ln_w_d(np.where(d > 0, d, 1.0)), -np.inf)
        return _scalar(out, x)

    def w0(self, x):
        return _scalar(np.exp(self.ln_w0(x)), x)

    def c0(self, x):
        d = self._to_d(x)
        return _scalar(np.exp(self.ln_c0_d(d)), x)

    def h0(self, x):
        d = self._to_d(x)
        return _scalar(np.exp(self.ln_w_d(d)) * self.g_d(d), x)

    def beta_at(self, x):
        """beta(x, 0) = c0 h0 / w0^2."""
        return _scalar(self.beta_d(self._to_d(x)), x)

    def g_at(self, x):
        """int_x^b (1 - beta(x', 0)) dx', which equals h0 / w0."""
        return _scalar(self.g_d(self._to_d(x)), x)

    # -- integrals ---------------------------------------------------------
    def panel_edges_d(self, d_min: float = 1e-40, per_decade: int = 2) -> np.ndarray:
        """Panels in d clustered geometrically towards the support end.

        Branch points of the closed form get extra panels clustered on both
        sides, since the density can jump there.
        """
        b = self.support_end
        n = max(8, int(per_decade * math.log10(b / d_min)))
        # the pair may be singular at x = 0 (LSW cube root), so cluster there too
        parts = [[0.0], np.geomspace(d_min, b, n), b - b * np.geomspace(1e-12, 0.5, 16)]
        for v in self.breakpoints_d():
            if d_min < v < b:
                offsets = np.geomspace(1e-10, 1.0, 41)
                parts += [[v], v - v * offsets[:-1], v + (b - v) * offsets[:-1]]
        return np.unique(np.concatenate(parts))

    def integrate_d(self, fun, order: int = 20) -> float:
        """int_0^b fun(d) dd using the profile's panels."""
        return float(integrate_panels(fun, self.panel_edges_d(), order).sum())

    def mass(self) -> float:
        return self.integrate_d(lambda d: np.exp(self.ln_w_d(np.maximum(d, 1e-300))))


@dataclass(frozen=True)
class PowerLaw(Profile):
    p: float = 1.0
    kind = "power_law"

    def __post_init__(self):
        if not (self.p > 0 and math.isfinite(self.p)):
            raise ParameterError("power-law exponent must be positive")

    @property
    def beta0_limit(self):
        return self.p / (self.p + 1.0)

    @property
    def params(self):
        return {"p": self.p}

    def _ln_shape(self, d):
        with np.errstate(divide="ignore"):
            return self.p * np.log(d)

    def ln_w_ratio_d(self, d_ref, u):
        return self.p * np.log1p(np.asarray(u, dtype=float) / d_ref)

    def g_d(self, d):
        return np.asarray(d, dtype=float) / (self.p + 1.0)

    def beta_d(self, d):
        return np.full_like(np.asarray(d, dtype=float), self.p / (self.p + 1.0))


@dataclass(frozen=True)
class CriticalExp(Profile):
    kind = "critical_exp"
    beta0_limit = 1.0

    def _ln_shape(self, d):
        with np.errstate(divide="ignore"):
            return -1.0 / d

    def ln_w_ratio_d(self, d_ref, u):
        u = np.asarray(u, dtype=float)
        return u / (d_ref * (d_ref + u))

    def beta_d(self, d):
        d = np.asarray(d, dtype=float)
        X = 1.0 / d
        return X * scaled_e2(X)

    def g_d(self, d):
        d = np.asarray(d, dtype=float)
        return d * scaled_e2(1.0 / d)


@dataclass(frozen=True)
class TruncatedPower(Profile):
    """w0 = C (x0 - x)^r on [0, x0) with constant beta = beta0, r = beta0/(1-beta0)."""

    beta0: float = 0.3
    x0: float = 0.05
    kind = "truncated_power"

    def __post_init__(self):
        if not (0.0 < self.beta0 < 1.0):
            raise ParameterError("beta0 must lie in (0, 1)")
        if not (0.0 < self.x0 < 1.0):
            raise ParameterError("x0 must lie in (0, 1)")

    @property
    def support_end(self):
        return self.x0

    @property
    def beta0_limit(self):
        return self.beta0  # beta is constant up to the support end

    @property
    def params(self):
        return {"beta0": self.beta0, "x0": self.x0}

    @property
    def exponent(self) -> float:
        return self.beta0 / (1.0 - self.beta0)

    def _ln_shape(self, d):
        with np.errstate(divide="ignore"):
            return self.exponent * np.log(d)

    def ln_w_ratio_d(self, d_ref, u):
        return self.exponent * np.log1p(np.asarray(u, dtype=float) / d_ref)

    def g_d(self, d):
        return (1.0 - self.beta0) * np.asarray(d, dtype=float)

    def beta_d(self, d):
        return np.full_like(np.asarray(d, dtype=float), self.beta0)


@dataclass(frozen=True)
class PiecewiseBeta(Profile):
    """beta = beta0 on [0, x0] and beta = 1 - eps (1 - x) on (x0, 1)."""

    beta0: float = 0.4
    x0: float = 0.6
    eps: float = 0.01
    kind = "piecewise_beta"
    beta0_limit = 1.0

    def __post_init__(self):
        if not (0.0 < self.beta0 < 1.0):
            raise ParameterError("beta0 must lie in (0, 1)")
        if not (0.0 < self.x0 < 1.0):
            raise ParameterError("x0 must lie in (0, 1)")
        if not (0.0 < self.eps * (1.0 - self.x0) < 1.0):
            raise ParameterError("eps must satisfy 0 < eps (1 - x0) < 1")

    @property
    def params(self):
        return {"beta0": self.beta0, "x0": self.x0, "eps": self.eps}

    @property
    def _d0(self):
        return 1.0 - self.x0

    @property
    def _g1(self):
        return 0.5 * self.eps * self._d0**2

    def breakpoints_d(self):
        return [self._d0]

    def _ln_shape(self, d):
        d = np.asarray(d, dtype=float)
        r = self.beta0 / (1.0 - self.beta0)
        d0 = self._d0
        pos = np.where(d > 0, d, 1.0)
        inner = np.where(d > 0, -2.0 / (self.eps * pos) - 2.0 * np.log(pos), -np.inf)
        ln_at_d0 = -2.0 / (self.eps * d0) - 2.0 * np.log(d0)
        big = np.maximum(d, d0)
        outer = ln_at_d0 + r * (np.log(self._g1 + (1.0 - self.beta0) * (big - d0)) - math.log(self._g1))
        return np.where(d <= d0, inner, outer)

    def g_d(self, d):
        d = np.asarray(d, dtype=float)
        return np.where(
            d <= self._d0,
            0.5 * self.eps * d * d,
            self._g1 + (1.0 - self.beta0) * (d - self._d0),
        )

    def beta_d(self, d):
        d = np.asarray(d, dtype=float)
        return np.where(d <= self._d0, 1.0 - self.eps * d, self.beta0)


_KINDS = {
    "power_law": PowerLaw,
    "critical_exp": CriticalExp,
    "truncated_power": TruncatedPower,
    "piecewise_beta": PiecewiseBeta,
}


def _scalar(value, like):
    if np.ndim(like) == 0:
        return float(value)
    return np.asarray(value, dtype=float)


def normalize(profile: Profile) -> Profile:
    """Return a copy whose mass is one."""
    m = profile.mass()
    if not (m > 0 and math.isfinite(m)):
        raise ParameterError("profile mass must be finite and positive")
    return replace(profile, ln_norm=profile.ln_norm - math.log(m))


def normalization_factor(profile: Profile) -> float:
    """Multiplier that :func:`normalize` would apply."""
    return 1.0 / profile.mass()


def build(spec: dict | Profile, normalized: bool = True) -> Profile:
    """Construct a profile from a config dict such as ``{"kind": "power_law", "p": 1}``."""
    if isinstance(spec, Profile):
        prof = spec
    else:
        spec = dict(spec)
        kind = str(spec.pop("kind", "")).lower()
        if kind not in _KINDS:
            raise ConfigError(f"unknown profile kind {kind!r}")
        try:
            prof = _KINDS[kind](**{k: float(v) for k, v in spec.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return normalize(prof) if normalized else prof


# -- classification ----------------------------------------------------------

@dataclass(frozen=True)
class Classification:
    label: str  # "subcritical", "critical" or "unclassified"
    beta0: float | None = None

    def __str__(self):
        if self.label == "subcritical":
            return f"Subcritical({self.beta0:.6g})"
        return self.label.capitalize()


def classify(profile: Profile, window=(1e-5, 1e-2), n: int = 40) -> Classification:
    """Detect the limit of beta(x, 0) at x -> 1 from a linear fit in 1 - x."""
    if profile.support_end < 1.0:
        return Classification("unclassified")
    d = np.geomspace(window[0], window[1], n)
    beta = profile.beta_d(d)
    slope, intercept = np.polyfit(d, beta, 1)
    fitted = intercept + slope * d
    if np.ptp(beta) > 0.05 and np.max(np.abs(beta - fitted)) > 0.25 * np.ptp(beta):
        return Classification("unclassified")
    if abs(intercept - 1.0) < 1e-3:
        return Classification("critical", 1.0)
    if 0.0 < intercept < 1.0:
        return Classification("subcritical", float(intercept))
    return Classification("unclassified")


# -- moments and reconstruction ----------------------------------------------

def mean_size(profile: Profile, method: str = "density") -> float:
    """Mean of X0 with density c0 / w0(0).

    ``method="density"`` integrates x c0 directly; ``method="beta"`` uses
    ``b - int_0^b beta``, which follows from integrating by parts.
    """
    b = profile.support_end
    if method == "density":
        w_at_0 = math.exp(float(profile.ln_w_d(b)))
        edges = profile.panel_edges_d()
        body = integrate_panels(lambda d: (b - d) * np.exp(profile.ln_c0_d(d)), edges[1:], 20).sum()
        # innermost panel by parts: c0 = dw0/dd and w0 vanishes at the support end
        d1 = edges[1]
        w1 = math.exp(float(profile.ln_w_d(d1)))
        tail = (b - d1) * w1 + float(integrate_panels(
            lambda d: np.exp(profile.ln_w_d(np.maximum(d, 1e-300))), edges[:2], 20).sum())
        return float(body + tail) / w_at_0
    if method == "beta":
        return b - profile.integrate_d(lambda d: profile.beta_d(np.maximum(d, 1e-300)))
    raise ParameterError("method must be 'density' or 'beta'")


def reconstruct_ln_w0(profile: Profile, xs: Sequence[float]) -> np.ndarray:
    """ln w0(x) - ln w0(0) rebuilt from beta alone.

    g is recomputed as int_x^b (1 - beta) by quadrature and then
    d/dx ln w0 = -beta / g is integrated from 0.
    """
    b = profile.support_end
    xs = np.asarray(xs, dtype=float)
    edges_d = profile.panel_edges_d(d_min=1e-12)

    def one_minus_beta(d):
        return 1.0 - profile.beta_d(np.maximum(d, 1e-300))

    cum = np.concatenate([[0.0], np.cumsum(integrate_panels(one_minus_beta, edges_d, 20))])

    def g_quad(d):
        d = np.asarray(d, dtype=float)
        idx = np.clip(np.searchsorted(edges_d, d, side="right") - 1, 0, len(edges_d) - 2)
        left = edges_d[idx]
        nodes, weights = np.polynomial.legendre.leggauss(20)
        nodes = 0.5 * (nodes + 1.0)
        pts = left[..., None] + (d - left)[..., None] * nodes
        return cum[idx] + (d - left) * (one_minus_beta(pts) @ (0.5 * weights))

    def rate_d(d):
        return profile.beta_d(d) / g_quad(d)

    out = np.empty_like(xs)
    for i, x in enumerate(xs):
        d_lo = b - x
        if d_lo >= b:
            out[i] = 0.0
            continue
        pts = [np.geomspace(d_lo, b, 60)]
        pts.append(edges_d[(edges_d > d_lo) & (edges_d < b)])
        out[i] = -float(integrate_panels(rate_d, np.unique(np.concatenate(pts)), 20).sum())
    return out


# -- convergence criterion for critical data -----------------------------------

class YVariable:
    """The variable y(x) = int^x dx' / (kappa0 psi - phi) for a pair.

    With sigma = 1 - x and kappa0 psi - phi = A2 sigma^2 + A3 sigma^3 + ...,
    the double and simple poles are integrated analytically and only the
    regular remainder is handled by quadrature.
    """

    SPLIT = 1e-4

    def __init__(self, pair: CoefficientPair):
        self.pair = pair
        k0 = kappa_zero(pair)
        self.kappa0 = k0
        self.A2 = 0.5 * (k0 * pair.psi2 - pair.phi2)
        a3_phi, a3_psi = pair.phi_series[2], pair.psi_series[2]
        self.A3 = k0 * a3_psi - a3_phi
        edges = np.unique(np.concatenate([np.geomspace(self.SPLIT, 1.0, 40)]))
        self._edges = edges
        panels = integrate_panels(self._regular, edges, 20)
        # cumulative from sigma to 1
        self._tail = np.concatenate([np.cumsum(panels[::-1])[::-1], [0.0]])

    def _regular(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        phi, psi = self.pair.phi_psi_s(sigma)
        denom = self.kappa0 * psi - phi
        return 1.0 / denom - 1.0 / (self.A2 * sigma**2) + self.A3 / (self.A2**2 * sigma)

    def _regular_from(self, sigma):
        sigma = np.clip(np.asarray(sigma, dtype=float), self.SPLIT, 1.0)
        idx = np.clip(np.searchsorted(self._edges, sigma, side="right") - 1, 0, len(self._edges) - 2)
        right = self._edges[idx + 1]
        nodes, weights = np.polynomial.legendre.leggauss(20)
        nodes = 0.5 * (nodes + 1.0)
        pts = sigma[..., None] + (right - sigma)[..., None] * nodes
        partial = (right - sigma) * (self._regular(pts) @ (0.5 * weights))
        return self._tail[idx + 1] + partial

    def y_of_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        out = (1.0 / sigma - 1.0) / self.A2 + self.A3 / self.A2**2 * np.log(sigma) + self._regular_from(sigma)
        return out if out.ndim else float(out)

    def sigma_of_y(self, y: float) -> float:
        lo, hi = math.log(1e-300), 0.0
        if y < self.y_of_sigma(1.0):
            raise DomainError("y lies below the value at x = 0")
        return math.exp(optimize.brentq(lambda L: self.y_of_sigma(math.exp(L)) - y, lo, hi, xtol=1e-15, rtol=1e-15))


def criterion_residuals(
    profile: Profile,
    pair: CoefficientPair,
    y_samples: Sequence[float],
    z_samples: Sequence[float],
) -> np.ndarray:
    """|w0(y + lambda(y) z) / w0(y) - exp(-z)| on a (y, z) grid.

    Here w0 is read in the y variable of :class:`YVariable` and
    lambda(y) = 2 g(x) / (gamma (1 - x)^2) with gamma the curvature of
    kappa0 psi - phi at x = 1.
    """
    if profile.support_end < 1.0:
        raise DomainError("the criterion needs data supported up to x = 1")
    ys = np.asarray(y_samples, dtype=float)
    zs = np.asarray(z_samples, dtype=float)
    yv = YVariable(pair)
    out = np.empty((len(ys), len(zs)))
    for i, y in enumerate(ys):
        sigma = yv.sigma_of_y(y)
        lam = float(profile.g_d(sigma)) / (yv.A2 * sigma**2)
        ln_here = float(profile.ln_w_d(sigma))
        for j, z in enumerate(zs):
            if z == 0.0:
                out[i, j] = 0.0
                continue
            sigma2 = yv.sigma_of_y(y + lam * z)
            ratio = math.exp(float(profile.ln_w_d(sigma2)) - ln_here)
            out[i, j] = abs(ratio - math.exp(-z))
    return out


def h0_identity_residual(profile: Profile, xs: Sequence[float]) -> float:
    """Max relative gap between int_x^b w0 (by quadrature) and g(x) w0(x).

    Both sides are divided by w0(x), so the check stays meaningful where w0
    underflows.
    """
    b = profile.support_end
    worst = 0.0
    for x in np.asarray(xs, dtype=float):
        d_x = b - x
        if not d_x > 0.0:
            continue
        near = np.geomspace(1e-14, 1.0, 60)
        # panels in the offset u = d - d_x, clustered at both ends: the weight
        # piles up at u = 0 for fast-decaying data
        kinks = [v - d_x for v in profile.breakpoints_d() if 0.0 < v < d_x]
        edges = np.unique(np.concatenate([[-d_x, 0.0], -d_x * near, -d_x * (1.0 - near), kinks]))
        with np.errstate(under="ignore", divide="ignore"):
            lhs = float(integrate_panels(
                lambda u: np.exp(profile.ln_w_ratio_d(d_x, np.maximum(u, 1e-300 - d_x))), edges, 20).sum())
        rhs = float(profile.g_d(d_x))
        worst = max(worst, abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return worst
