"""Method-of-characteristics solver for the transport equation with the
nonlocal kappa closure.

Nodes carry fixed initial labels, stored as ``delta = b - z`` (distance to
the end of the initial support) and uniformly spaced in ``ell = ln delta``.
Each node tracks ``ln s`` with ``s = 1 - x`` and the log Jacobian
``ln D = ln dx/dz``. The solution value at a node is exact:
``w = exp(t) w0(z)``.

Integrals against ``c dx`` are done in label space, where
``c dx = exp(t) c0(z) dz``: composite Simpson over the nodes, a small
boundary cell between x = 0 and the first node inside, and a closed-form
tail beyond the last node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from ._quad import gauss_legendre, simpson_weights_uneven
from .coeffs import CoefficientPair
from .errors import DegenerateStateError, HistoryGapError, ParameterError, StepSizeError
from .profiles import Profile

_X_GUARD = 1e-12


# -- pair evaluation that tolerates nodes that have left through x = 0 --------

def _rates(pair: CoefficientPair, s: np.ndarray):
    """``(phi(1-s)/s, psi(1-s)/s)``; nodes with s > 1 use the formulas at x < 0."""
    out_p, out_q = pair.rates(np.minimum(s, 1.0))
    beyond = s > 1.0
    if np.any(beyond):
        x = 1.0 - s[beyond]
        out_p = out_p.copy()
        out_q = out_q.copy()
        out_p[beyond] = pair.phi_x[0](x) / s[beyond]
        out_q[beyond] = pair.psi_x[0](x) / s[beyond]
    return out_p, out_q


def _values(pair: CoefficientPair, x: np.ndarray):
    """``(phi(x), psi(x))`` for x in (-inf, 1); accurate near x = 1."""
    x = np.asarray(x, dtype=float)
    s = 1.0 - x
    p, q = _rates(pair, np.maximum(s, 1e-300))
    return p * s, q * s


def _velocity(pair: CoefficientPair, x: np.ndarray, kappa: float) -> np.ndarray:
    phi, psi = _values(pair, x)
    return phi - kappa * psi


def _slopes(pair: CoefficientPair, x: np.ndarray):
    x = np.asarray(x, dtype=float)
    xg = np.where(np.abs(x) < _X_GUARD, _X_GUARD, x)
    return pair.phi_x[1](xg), pair.psi_x[1](xg)


# -- data types -----------------------------------------------------------------

@dataclass
class SolverOptions:
    n: int = 4000
    s_floor: float = 1e-12
    dt_max: float = 2e-2
    reinsert_floor: int = 512
    probe_xs: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 0.9)
    cadence: float = 0.5
    tracer_xs: Sequence[float] = ()
    max_halvings: int = 12
    refine_dx: float = 2.5e-3
    refine_band: tuple = (0.05, 0.5)
    project_mass: bool = True
    dt_start: float = 1e-3

    @classmethod
    def from_config(cls, cfg: dict | None) -> "SolverOptions":
        cfg = dict(cfg or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            from .errors import ConfigError

            raise ConfigError(f"unknown solver options: {sorted(unknown)}")
        return cls(**cfg)


@dataclass
class Diagnostics:
    t: float
    kappa: float
    kappa_avg: float
    mass: float
    w0t: float
    meanX: float
    F0: float
    probe_xs: tuple
    beta: np.ndarray
    g: np.ndarray
    kappa_f1: float = math.nan
    mass_direct: float = math.nan
    n_active: int = 0
    nodes_ordered: bool = True

    def row(self) -> list:
        return [self.t, self.kappa, self.kappa_avg, self.mass, self.w0t, self.meanX, self.F0,
                *self.beta.tolist(), *self.g.tolist()]


@dataclass
class CharacteristicState:
    """Moving grid of characteristics.

    Arrays are ordered by decreasing label distance ``delta`` (increasing z,
    increasing x). Entries with ``s >= 1`` have left the domain; at most one
    such node (the most recent exit) is kept to bracket x = 0.
    """

    profile: Profile
    t: float
    ell: np.ndarray
    ln_s: np.ndarray
    ln_d: np.ndarray
    ln_w0: np.ndarray
    ln_c0_delta: np.ndarray
    edge_ln_s: float | None = None
    kappa_t: list = field(default_factory=list)
    kappa_v: list = field(default_factory=list)
    exits: list = field(default_factory=list)
    mass_shift: float = 0.0  # accumulated kappa-time added by the mass projection
    # (t, ell) of characteristics as they reach x = 0, tracked for cusped pairs
    exit_track: list = field(default_factory=list)
    exit_seed: tuple | None = None  # (t, ell*, d ell*/dt) at the start of the run

    @property
    def support_end(self) -> float:
        return self.profile.support_end

    @property
    def delta(self) -> np.ndarray:
        return np.exp(self.ell)

    @property
    def z(self) -> np.ndarray:
        return self.support_end - self.delta

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.ln_s)

    @property
    def x(self) -> np.ndarray:
        return -np.expm1(self.ln_s)

    @property
    def support_s(self) -> float | None:
        return None if self.edge_ln_s is None else math.exp(self.edge_ln_s)

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.ln_s < 0.0))

    def copy(self) -> "CharacteristicState":
        return CharacteristicState(
            profile=self.profile, t=self.t, ell=self.ell.copy(), ln_s=self.ln_s.copy(),
            ln_d=self.ln_d.copy(), ln_w0=self.ln_w0.copy(), ln_c0_delta=self.ln_c0_delta.copy(),
            edge_ln_s=self.edge_ln_s, kappa_t=list(self.kappa_t), kappa_v=list(self.kappa_v),
            exits=list(self.exits), mass_shift=self.mass_shift,
            exit_track=list(self.exit_track), exit_seed=self.exit_seed,
        )


def init_grid(profile: Profile, n: int, s_floor: float) -> CharacteristicState:
    """Labels with ``b - z`` log-uniform from b down to ``b * s_floor``."""
    if n < 4:
        raise ParameterError("need at least 4 nodes")
    if not (0.0 < s_floor < 1.0):
        raise ParameterError("s_floor must lie in (0, 1)")
    b = profile.support_end
    ell = np.linspace(math.log(b), math.log(b * s_floor), n)
    delta = np.exp(ell)
    delta[0] = b
    ln_s = np.log((1.0 - b) + delta)
    edge = math.log(1.0 - b) if b < 1.0 else None
    return CharacteristicState(
        profile=profile, t=0.0, ell=ell, ln_s=ln_s, ln_d=np.zeros(n),
        ln_w0=profile.ln_w_d(delta), ln_c0_delta=profile.ln_c0_d(delta) + ell, edge_ln_s=edge,
    )


# -- label-space quadrature ---------------------------------------------------------

def _cusp_power(pair: CoefficientPair) -> int:
    """Root order of the flow map at x = 0: labels are smooth in x**(1/r)."""
    return 3 if pair.kind == "lsw" else 1


_TRACK_KEEP = 12
_SEED_WINDOW = 0.05


def _boundary_track(state: CharacteristicState, t_eval: float):
    """ell*(t) and its rate from recorded exit times, or None if too few.

    Each exit is a sample of the label sitting at x = 0; a polynomial in t
    through the latest samples is smooth where a spatial extrapolation is
    not. Shortly after the start the labels at x = 0 come from the cusp of
    the initial map, so there ell* is expanded in t**(1/3) about the seed.
    """
    rec = state.exit_track
    seed = state.exit_seed
    if seed is not None and t_eval - seed[0] < _SEED_WINDOW:
        t0, ell0, slope0 = seed
        t = np.array([r[0] for r in rec]) - t0
        ell = np.array([r[1] for r in rec]) - ell0 - slope0 * t
        powers = np.arange(4, 4 + min(3, t.size))
        tau = max(t_eval - t0, 0.0)
        if powers.size == 0:
            return ell0 + slope0 * tau, slope0
        r = np.cbrt(t)
        coef = np.linalg.lstsq(np.column_stack([r**k for k in powers]), ell, rcond=None)[0]
        rt = np.cbrt(tau)
        value = ell0 + slope0 * tau + float(sum(c * rt**k for c, k in zip(coef, powers)))
        rate = slope0 + float(sum(c * k / 3.0 * rt ** (k - 3) for c, k in zip(coef, powers)))
        return value, rate
    if len(rec) < 6:
        return None
    t = np.array([r[0] for r in rec[-8:]])
    ell = np.array([r[1] for r in rec[-8:]])
    coef = np.polyfit(t - t[-1], ell, 2)
    tau = t_eval - t[-1]
    return float(np.polyval(coef, tau)), float(np.polyval(np.polyder(coef), tau))


class _CuspZone:
    """Flow map near x = 0 when the coefficients behave like x**(1/3) there.

    With u = x**(1/3) the label coordinate is a polynomial in u whose low
    orders vanish, ``ell = ell* + sum_k a_k u**k`` for k >= 3. It is fitted
    through the first few active nodes; integrals over the zone run in u, so
    the cusp never meets a rule that expects smoothness in ell.
    """

    NODES = 8
    ORDER = 12

    FREE_POWERS = 4

    def __init__(self, ell: np.ndarray, x: np.ndarray, ell_star: float | None = None):
        u = np.cbrt(x)
        self.u_end = float(u[-1])
        scale = self.u_end
        self.scale = scale
        r = u / scale
        if ell_star is None:
            powers = np.arange(3, 3 + ell.size - 1)
            mat = np.column_stack([np.ones_like(r)] + [r**k for k in powers])
            coef = np.linalg.solve(mat, ell)
            self.ell_star = float(coef[0])
            self.coef = coef[1:]
        else:
            # ell* is known, so a short least-squares fit suffices
            powers = np.arange(3, 3 + self.FREE_POWERS)
            mat = np.column_stack([r**k for k in powers])
            self.coef = np.linalg.lstsq(mat, ell - ell_star, rcond=None)[0]
            self.ell_star = float(ell_star)
        self.powers = powers

    def ell_of_u(self, u):
        r = np.asarray(u, dtype=float) / self.scale
        return self.ell_star + sum(c * r**k for c, k in zip(self.coef, self.powers))

    def dell_dx(self, u):
        """d ell / d x = (d ell / d u) / (3 u**2), finite at u = 0."""
        r = np.asarray(u, dtype=float) / self.scale
        acc = sum(c * k * r ** (k - 3) for c, k in zip(self.coef, self.powers))
        return acc / (3.0 * self.scale**3)

    def points(self, u_lo: float = 0.0):
        """Gauss points in u on [u_lo, u_end] with weights for int F c0 dz."""
        nodes, wts = gauss_legendre(self.ORDER)
        u = u_lo + (self.u_end - u_lo) * nodes
        ell = self.ell_of_u(u)
        dell_du = 3.0 * u**2 * self.dell_dx(u)
        return u**3, ell, -(self.u_end - u_lo) * wts * dell_du


class _Ensemble:
    """Quadrature over the current node positions for one (stage) configuration."""

    def __init__(self, state: CharacteristicState, ln_s: np.ndarray, cusp: int = 1,
                 t_eval: float | None = None):
        self.state = state
        self.t_eval = state.t if t_eval is None else t_eval
        self.ln_s = ln_s
        active = ln_s < 0.0
        idx = np.flatnonzero(active)
        if idx.size < 4 + (_CuspZone.NODES if cusp > 1 else 0):
            raise DegenerateStateError("too few characteristics remain inside the domain")
        self.first = int(idx[0])
        self.last = int(idx[-1])
        if not np.all(active[self.first:]):
            raise StepSizeError("characteristics left the domain out of order")
        self.x = -np.expm1(ln_s[self.first:])
        self.cw = np.exp(state.ln_c0_delta[self.first:])  # c0 * delta at nodes
        self.zone = None
        self.main_from = 0  # offset into the active arrays where Simpson starts
        if cusp > 1:
            self._cusp_boundary()
        else:
            self._boundary()
        weights = simpson_weights_uneven(state.ell[self.first + self.main_from:][::-1])[::-1]
        # pairs are anchored at the far end so an exit only changes the rule locally
        self.weights = np.concatenate([np.zeros(self.main_from), weights])

    def _cusp_boundary(self):
        k = _CuspZone.NODES
        f = self.first
        track = _boundary_track(self.state, self.t_eval)
        if f > 0 and self.ln_s[f - 1] == 0.0:
            # a node sitting exactly on x = 0 pins ell*
            ell = self.state.ell[f - 1 : f + k - 1]
            x = np.concatenate([[0.0], self.x[: k - 1]])
            self.zone = _CuspZone(ell[1:], x[1:], float(ell[0]))
        elif track is not None:
            ell = self.state.ell[f : f + k]
            self.zone = _CuspZone(ell, self.x[:k], track[0])
        else:
            ell = self.state.ell[f : f + k]
            self.zone = _CuspZone(ell, self.x[:k])
        self.ell_star = min(self.zone.ell_star, math.log(self.state.support_end))
        self.main_from = int(np.searchsorted(-self.state.ell[f:], -ell[-1]))
        self.cell_x, cell_ell, wts = self.zone.points()
        delta = np.exp(cell_ell)
        self.cell = np.exp(self.state.profile.ln_c0_d(delta)) * delta * wts

    def _boundary(self):
        """Locate x = 0 in label space and set up the partial cell."""
        st = self.state
        f = self.first
        if f == 0:
            # nothing has left yet: the first node sits at (or right of) x = 0
            self.ell_star = float(st.ell[0])
            self.cell = None
            self.cell_x = None
            return
        ells = st.ell[f - 1 : f + 3]
        xs = -np.expm1(self.ln_s[f - 1 : f + 3])
        coef = np.polyfit(ells - ells[1], xs, 3)
        poly = np.poly1d(coef)
        a, b = 0.0, float(ells[0] - ells[1])
        if xs[0] == 0.0:
            root = b
        else:
            root = optimize.brentq(poly, a, b, xtol=1e-15, rtol=1e-15)
        self.ell_star = float(ells[1] + root)
        nodes, wts = gauss_legendre(4)
        pts = root * nodes
        self.cell_x = poly(pts)
        cell_ell = ells[1] + pts
        delta = np.exp(cell_ell)
        cw = np.exp(st.profile.ln_c0_d(delta)) * delta
        self.cell = cw * wts * root

    def integrate(self, fx: np.ndarray, f_cell=None) -> float:
        """int f(x) c0 dz over active labels.

        ``fx`` holds f at the active nodes and ``f_cell`` at ``cell_x``.
        """
        total = float(self.weights @ (fx * self.cw))
        if self.cell is not None and f_cell is not None:
            total += float(self.cell @ f_cell)
        ln_w_last = self.state.ln_w0[self.last]
        return total + float(fx[-1]) * math.exp(ln_w_last)

    def kappa(self, pair: CoefficientPair) -> float:
        phi, psi = _values(pair, self.x)
        if self.cell is not None:
            phi_c, psi_c = _values(pair, self.cell_x)
            num = self.integrate(self.x + phi, self.cell_x + phi_c)
            den = self.integrate(psi, psi_c)
        else:
            num = self.integrate(self.x + phi)
            den = self.integrate(psi)
        if not den > 0.0:
            raise DegenerateStateError("kappa denominator is not positive")
        return num / den

    def mass_unscaled(self) -> float:
        return self.integrate(self.x, self.cell_x)


def kappa_closure(state: CharacteristicState, pair: CoefficientPair) -> float:
    """kappa = int (x + phi) c dx / int psi c dx for the current state."""
    return _Ensemble(state, state.ln_s, _cusp_power(pair)).kappa(pair)


# -- time stepping -------------------------------------------------------------------

def _rhs(state: CharacteristicState, pair: CoefficientPair, ln_s: np.ndarray, edge: float | None,
         t_eval: float | None = None):
    kappa = _Ensemble(state, ln_s, _cusp_power(pair), t_eval).kappa(pair)
    s = np.exp(ln_s)
    p, q = _rates(pair, s)
    dln_s = kappa * q - p
    x = -np.expm1(ln_s)
    dphi, dpsi = _slopes(pair, x)
    dln_d = dphi - kappa * dpsi
    dedge = None
    if edge is not None:
        pe, qe = _rates(pair, np.array([math.exp(edge)]))
        dedge = float(kappa * qe[0] - pe[0])
    return kappa, dln_s, dln_d, dedge


def _rk4(state, pair, dt, k1=None):
    y0, d0, e0 = state.ln_s, state.ln_d, state.edge_ln_s
    kap1, a1, b1, c1 = k1 if k1 is not None else _rhs(state, pair, y0, e0)
    layer = _CuspLayer(state, pair, dt, kap1) if _cusp_power(pair) == 3 else None

    def shift(e, c, h):
        return None if e is None else e + h * c

    def stage(y, tau, kpoly):
        if layer is None:
            return y
        return layer.apply(y, None, tau, kpoly)[0]


    h = 0.5 * dt
    t0 = state.t
    kap2, a2, b2, c2 = _rhs(state, pair, stage(y0 + h * a1, h, [kap1]), shift(e0, c1, h), t0 + h)
    kap3, a3, b3, c3 = _rhs(state, pair, stage(y0 + h * a2, h, [(kap2 - kap1) / h, kap1]),
                            shift(e0, c2, h), t0 + h)
    kap4, a4, b4, c4 = _rhs(state, pair, stage(y0 + dt * a3, dt, [(kap3 - kap1) / h, kap1]),
                            shift(e0, c3, dt), t0 + dt)
    y = y0 + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    d = d0 + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
    e = None if e0 is None else e0 + dt / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)
    if layer is not None:
        km = 0.5 * (kap2 + kap3)
        quad = [(2.0 * kap1 - 4.0 * km + 2.0 * kap4) / dt**2, (-3.0 * kap1 + 4.0 * km - kap4) / dt, kap1]
        y, d, t_exit = layer.apply(y, d, dt, quad, exits=True)
        hit = np.flatnonzero(np.isfinite(t_exit))
        exits = sorted(zip((t0 + t_exit[hit]).tolist(), state.ell[layer.idx[hit]].tolist()))
    else:
        exits = []
    return y, d, e, exits


def step(state: CharacteristicState, pair: CoefficientPair, dt: float, _k1=None,
         project: bool = True) -> CharacteristicState:
    """One classical Runge-Kutta step; kappa is re-evaluated at every stage."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    y, d, e, exits = _rk4(state, pair, dt, _k1)
    if not np.all(np.diff(y) < 0.0) or not np.all(np.isfinite(y)):
        raise StepSizeError("characteristics would cross; reduce the step")
    new = state.copy()
    new.t = state.t + dt
    new.exit_track.extend(exits)
    del new.exit_track[:-_TRACK_KEEP]
    if project:
        y, d, e = _project_mass(new, pair, y, d, e)
    new.ln_s, new.ln_d, new.edge_ln_s = y, d, e
    _drop_exited(new)
    return new


_LAYER_X = 0.1
_LAYER_STEPS = 16


class _CuspLayer:
    """LSW characteristics near x = 0 integrated in the variable u = x**(1/3).

    Along a characteristic dt/du = 3 u**2 / v(u**3) is smooth through the
    cusp, while dx/dt is not, so RK4 in t loses most of its order there.
    Each call takes kappa over the step as a polynomial in the elapsed time.
    """

    def __init__(self, state: CharacteristicState, pair: CoefficientPair, dt: float, kappa: float):
        x0 = -np.expm1(state.ln_s)
        # wide enough that nodes ending near x = 0 started inside the layer
        width = max(_LAYER_X, 3.0 * dt * abs(float(_velocity(pair, np.array([0.0]), kappa)[0])))
        self.idx = np.flatnonzero((x0 >= 0.0) & (x0 < width))
        self.pair = pair
        self.x0 = x0[self.idx]
        self.u0 = np.cbrt(self.x0)
        self.lnd0 = state.ln_d[self.idx]

    @staticmethod
    def _rhs(u, tau, kpoly):
        # LSW in u: phi = u - u^3, psi = 1 - u, 3u^2 phi' = 1 - 3u^2, 3u^2 psi' = -1
        kap = _horner(kpoly, tau)
        u2 = u * u
        v = u - u2 * u - kap * (1.0 - u)
        inv = 1.0 / v
        return 3.0 * u2 * inv, (1.0 - 3.0 * u2 + kap) * inv, v

    def advance(self, tau_end: float, kpoly):
        """(ln s, ln D) of the layer nodes after ``tau_end``; None if not applicable.

        Nodes that reach x = 0 are continued outside with the exit speed.
        """
        if self.idx.size == 0:
            return None
        kpoly = [float(c) for c in kpoly]
        _, _, v0 = self._rhs(self.u0, 0.0, kpoly)
        if np.any(v0 >= 0.0):
            return None
        reach = 1.5 * float(np.max(-v0)) * tau_end
        u_lo = np.cbrt(np.maximum(self.x0 - reach, 0.0))
        hu = (u_lo - self.u0) / _LAYER_STEPS
        u, tau, lnd = self.u0.copy(), np.zeros_like(self.u0), self.lnd0.copy()
        f_t, f_d, v = self._rhs(u, tau, kpoly)
        grid = [(u, tau, lnd, f_t, f_d)]
        for _ in range(_LAYER_STEPS):
            k1t, k1d = f_t, f_d
            k2t, k2d, _ = self._rhs(u + 0.5 * hu, tau + 0.5 * hu * k1t, kpoly)
            k3t, k3d, _ = self._rhs(u + 0.5 * hu, tau + 0.5 * hu * k2t, kpoly)
            k4t, k4d, _ = self._rhs(u + hu, tau + hu * k3t, kpoly)
            tau = tau + hu / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t)
            lnd = lnd + hu / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
            u = u + hu
            f_t, f_d, v = self._rhs(u, tau, kpoly)
            if np.any(v >= 0.0):
                return None
            grid.append((u, tau, lnd, f_t, f_d))
        U, T, D, FT, FD = (np.array(c) for c in zip(*grid))
        n = self.u0.size
        cols = np.arange(n)
        crossed = T >= tau_end
        inside = crossed[-1]
        if not np.all(inside | (u_lo == 0.0)):
            return None  # the window was too short for some node
        k = np.where(inside, np.argmax(crossed, axis=0), 1)
        k = np.maximum(k, 1)
        ka = k - 1
        h = U[k, cols] - U[ka, cols]
        ta, tb = T[ka, cols], T[k, cols]
        da, db = FT[ka, cols] * h, FT[k, cols] * h
        # tau(r) is increasing on [0, 1]; Newton from the secant guess
        span = tb - ta
        r = np.clip((tau_end - ta) / np.where(span > 0, span, 1.0), 0.0, 1.0)
        for _ in range(8):
            f = _hermite(r, ta, tb, da, db) - tau_end
            fp = _hermite_slope(r, ta, tb, da, db)
            r = np.clip(r - f / np.where(fp > 0, fp, 1.0), 0.0, 1.0)
        u_new = U[ka, cols] + r * h
        lnd_new = _hermite(r, D[ka, cols], D[k, cols], FD[ka, cols] * h, FD[k, cols] * h)
        x_new = u_new**3
        # exited nodes: straight continuation past x = 0
        t_exit = T[-1]
        v_exit = -_horner(kpoly, t_exit)
        x_out = v_exit * (tau_end - t_exit)
        x_new = np.where(inside, x_new, np.minimum(x_out, -1e-300))
        lnd_new = np.where(inside, lnd_new, D[-1])
        # exit times of nodes that were strictly inside at the start
        t_exit = np.where(~inside & (self.x0 > 0.0), t_exit, np.nan)
        return np.log1p(-x_new), lnd_new, t_exit

    def apply(self, ln_s, ln_d, tau_end, kpoly, exits=False):
        res = self.advance(tau_end, kpoly)
        if res is None:
            out = (ln_s, ln_d)
            return out + (np.full(self.idx.size, np.nan),) if exits else out
        ln_s = ln_s.copy()
        ln_s[self.idx] = res[0]
        if ln_d is not None:
            ln_d = ln_d.copy()
            ln_d[self.idx] = res[1]
        return (ln_s, ln_d, res[2]) if exits else (ln_s, ln_d)


def _horner(coef, t):
    acc = coef[0]
    for c in coef[1:]:
        acc = acc * t + c
    return acc


def _hermite_slope(r, fa, fb, da, db):
    r2 = r * r
    return (6 * r2 - 6 * r) * fa + (3 * r2 - 4 * r + 1) * da + (-6 * r2 + 6 * r) * fb + (3 * r2 - 2 * r) * db


def _hermite(r, fa, fb, da, db):
    r2, r3 = r * r, r * r * r
    return (2 * r3 - 3 * r2 + 1) * fa + (r3 - 2 * r2 + r) * da + (-2 * r3 + 3 * r2) * fb + (r3 - r2) * db


def _project_mass(state: CharacteristicState, pair: CoefficientPair, y, d, e):
    """Shift the step's integrated kappa so the quadrature mass is exactly one.

    Classical RK4 keeps linear invariants only; here the node positions enter
    the mass nonlinearly through exits at x = 0, so the drift is removed by a
    scalar correction along d(state)/d(kappa).
    """
    _, q = _rates(pair, np.exp(y))
    _, dpsi = _slopes(pair, -np.expm1(y))
    qe = None if e is None else float(_rates(pair, np.array([math.exp(e)]))[1][0])
    target = math.exp(-state.t)

    def shifted(mu):
        return y + mu * q

    def defect(mu):
        return _Ensemble(state, shifted(mu), _cusp_power(pair)).mass_unscaled() - target

    mu, r0 = 0.0, defect(0.0)
    if abs(r0) <= 1e-15 * target:
        return y, d, e
    h = 1e-7
    slope = (defect(h) - r0) / h
    for _ in range(3):
        if slope == 0.0:
            break
        mu_next = mu - r0 / slope
        r_next = defect(mu_next)
        if mu_next != mu:
            slope = (r_next - r0) / (mu_next - mu)
        mu, r0 = mu_next, r_next
        if abs(r0) <= 1e-15 * target:
            break
    if not np.all(np.diff(shifted(mu)) < 0.0):
        raise StepSizeError("mass projection reordered the characteristics")
    state.mass_shift += mu
    return shifted(mu), d - mu * dpsi, None if e is None else e + mu * qe


def _drop_exited(state: CharacteristicState) -> None:
    outside = np.flatnonzero(state.ln_s >= 0.0)
    if outside.size <= 1:
        return
    keep_from = int(outside[-1])
    for k in outside[:-1]:
        state.exits.append((state.t, float(state.profile.support_end - math.exp(state.ell[k]))))
    for name in ("ell", "ln_s", "ln_d", "ln_w0", "ln_c0_delta"):
        setattr(state, name, getattr(state, name)[keep_from:])


def _reinsert(state: CharacteristicState) -> CharacteristicState:
    """Halve the label spacing; new positions come from a spline in label space."""
    ell = state.ell
    if np.min(np.abs(np.diff(ell))) < 1e-9 * max(1.0, float(np.max(np.abs(ell)))):
        raise DegenerateStateError("the label grid is used up near x = 1; lower s_floor")
    mid = 0.5 * (ell[:-1] + ell[1:])
    new_ell = np.empty(ell.size + mid.size)
    new_ell[0::2] = ell
    new_ell[1::2] = mid
    # splines need increasing abscissae
    ln_s_spl = CubicSpline(ell[::-1], state.ln_s[::-1])
    ln_d_spl = CubicSpline(ell[::-1], state.ln_d[::-1])
    new_ln_s = np.empty_like(new_ell)
    new_ln_s[0::2] = state.ln_s
    new_ln_s[1::2] = ln_s_spl(mid)
    if not np.all(np.diff(new_ln_s) < 0):
        from scipy.interpolate import PchipInterpolator

        new_ln_s[1::2] = PchipInterpolator(ell[::-1], state.ln_s[::-1])(mid)
    new_ln_d = np.empty_like(new_ell)
    new_ln_d[0::2] = state.ln_d
    new_ln_d[1::2] = ln_d_spl(mid)
    delta = np.exp(new_ell)
    out = state.copy()
    out.ell, out.ln_s, out.ln_d = new_ell, new_ln_s, new_ln_d
    out.ln_w0 = state.profile.ln_w_d(delta)
    out.ln_c0_delta = state.profile.ln_c0_d(delta) + new_ell
    return out


def _refine_front(state: CharacteristicState, opts: SolverOptions) -> CharacteristicState:
    """Split label intervals ahead of the exit front.

    Near x = 0 the node spacing in x is otherwise set by the label spacing
    times the local stretch, which is coarse; when the coefficients have a
    cusp at x = 0 (LSW) the boundary quadrature then loses accuracy. Splits
    are only made inside ``refine_band`` where the flow map is smooth, so the
    new positions are accurate cubic interpolants (exact at t = 0).
    """
    if not opts.refine_dx or opts.refine_dx <= 0:
        return state
    lo, hi = opts.refine_band
    if state.t == 0.0:
        lo = 0.0  # positions are exact at t = 0, so the boundary can be resolved too
    x = -np.expm1(state.ln_s)
    left, right = x[:-1], x[1:]
    split = (left >= lo) & (right <= hi) & (right - left > opts.refine_dx)
    split[: int(np.argmax(state.ln_s <= 0.0))] = False
    if not np.any(split):
        return state
    idx = np.flatnonzero(split)
    mid_ell = 0.5 * (state.ell[idx] + state.ell[idx + 1])
    if state.t == 0.0:
        mid_ln_s = np.log((1.0 - state.support_end) + np.exp(mid_ell))
        mid_ln_d = np.zeros_like(mid_ell)
    else:
        mid_ln_s = _local_cubic(state.ell, state.ln_s, idx, mid_ell)
        mid_ln_d = _local_cubic(state.ell, state.ln_d, idx, mid_ell)
    out = state.copy()
    pos = idx + 1
    out.ell = np.insert(state.ell, pos, mid_ell)
    out.ln_s = np.insert(state.ln_s, pos, mid_ln_s)
    out.ln_d = np.insert(state.ln_d, pos, mid_ln_d)
    delta = np.exp(mid_ell)
    out.ln_w0 = np.insert(state.ln_w0, pos, state.profile.ln_w_d(delta))
    out.ln_c0_delta = np.insert(state.ln_c0_delta, pos, state.profile.ln_c0_d(delta) + mid_ell)
    if not np.all(np.diff(out.ln_s) < 0):
        return state
    if state.t == 0.0:
        return _refine_front(out, opts)
    return out


def _local_cubic(xg: np.ndarray, yg: np.ndarray, idx: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Cubic through the four samples around each interval [idx, idx + 1]."""
    n = xg.size
    start = np.clip(idx - 1, 0, n - 4)
    out = np.zeros_like(xq)
    cols = start[:, None] + np.arange(4)[None, :]
    xs = xg[cols]
    ys = yg[cols]
    for j in range(4):
        basis = np.ones_like(xq)
        for m in range(4):
            if m != j:
                basis *= (xq - xs[:, m]) / (xs[:, j] - xs[:, m])
        out += basis * ys[:, j]
    return out


def _max_rate(dln_s: np.ndarray, ln_s: np.ndarray) -> float:
    inside = ln_s < 0.0
    return float(np.max(np.abs(dln_s[inside]))) if np.any(inside) else 0.0


def advance(state: CharacteristicState, pair: CoefficientPair, t_target: float, opts: SolverOptions,
            on_step=None) -> CharacteristicState:
    """Integrate up to exactly ``t_target`` with adaptive steps."""
    if state.t == 0.0 and state.exit_seed is None and _cusp_power(pair) == 3:
        # x = z at t = 0, so d ell*/dt = v(0) / b
        b = state.support_end
        v0 = float(_velocity(pair, np.array([0.0]), kappa_closure(state, pair))[0])
        state.exit_seed = (0.0, math.log(b), v0 / b)
    t_start = 0.0
    while state.t < t_target - 1e-12:
        if state.n_active < opts.reinsert_floor:
            state = _reinsert(state)
        state = _refine_front(state, opts)
        k1 = _rhs(state, pair, state.ln_s, state.edge_ln_s)
        _record_kappa(state, k1[0])
        rate = _max_rate(k1[1], state.ln_s)
        # short steps at the start while the boundary track fills up
        ramp = opts.dt_start + state.t - t_start
        dt = min(opts.dt_max, ramp, 0.1 / rate if rate > 0 else opts.dt_max, t_target - state.t)
        for _ in range(opts.max_halvings):
            try:
                new = step(state, pair, dt, _k1=k1, project=opts.project_mass)
                break
            except StepSizeError:
                dt *= 0.5
        else:
            raise StepSizeError(f"step size collapsed at t = {state.t}")
        if t_target - new.t < 1e-12:
            new.t = t_target
        if on_step is not None:
            on_step(state, new)
        state = new
    _record_kappa(state, kappa_closure(state, pair))
    return state


def _record_kappa(state: CharacteristicState, kappa: float) -> None:
    if not state.kappa_t or state.t > state.kappa_t[-1]:
        state.kappa_t.append(state.t)
        state.kappa_v.append(kappa)


# -- observation -------------------------------------------------------------------------

class _LabelMap:
    """Splines of the current flow map used for probe evaluation."""

    def __init__(self, state: CharacteristicState, ens: _Ensemble):
        self.state = state
        self.ens = ens
        self.zone = ens.zone
        if self.zone is None:
            lo = max(ens.first - 1, 0)
        else:
            lo = ens.first + ens.main_from
        self.ell = state.ell[lo:][::-1]  # increasing
        self.ln_s = state.ln_s[lo:][::-1]
        self.ell_of_ln_s = CubicSpline(self.ln_s, self.ell)
        self.ln_s_of_ell = CubicSpline(self.ell, self.ln_s)
        self.ln_s_min = float(self.ln_s[0])
        self._x_nodes = -np.expm1(self.ln_s)
        self._ln_cw = state.ln_c0_delta[lo:][::-1]
        self._ln_w_last = float(state.ln_w0[ens.last])
        self.x_zone_end = None if self.zone is None else float(self._x_nodes[-1])

    def _in_zone(self, x: float) -> bool:
        return self.zone is not None and x < self.x_zone_end

    def locate(self, x: float):
        """Label coordinate ell and local Jacobian dx/dz at position x."""
        if self._in_zone(x):
            u = float(np.cbrt(x))
            ell = float(self.zone.ell_of_u(u))
            return ell, -1.0 / (math.exp(ell) * float(self.zone.dell_dx(u)))
        ln_s = math.log1p(-x)
        ell = float(self.ell_of_ln_s(ln_s))
        dell = float(self.ell_of_ln_s(ln_s, 1))
        s = 1.0 - x
        jac = (s / math.exp(ell)) / dell
        return ell, jac

    def integral_from(self, x_p: float, f, ln_scale: float = 0.0) -> float:
        """exp(ln_scale) int_{z_p}^{b} f(x(z)) c0(z) dz for a vectorized callable ``f``.

        Outside the cusp zone the density is taken from the profile itself on
        Gauss panels clustered at the probe label, and only the flow map
        x(ell) is interpolated. The density can vary by orders of magnitude
        between neighbouring nodes, the map does not.
        """
        with np.errstate(under="ignore"):
            tail = float(f(self._x_nodes[:1])[0]) * math.exp(self._ln_w_last + ln_scale)
            if self._in_zone(x_p):
                fvals = f(self._x_nodes)
                spl = CubicSpline(self.ell, fvals * np.exp(self._ln_cw + ln_scale)).antiderivative()
                xq, ell_q, wts = self.zone.points(float(np.cbrt(x_p)))
                delta = np.exp(ell_q)
                cw = np.exp(self.state.profile.ln_c0_d(delta) + ln_scale) * delta
                zone_part = float((wts * cw) @ f(xq))
                return zone_part + float(spl(self.ell[-1]) - spl(self.ell[0])) + tail
            ell_p = float(self.ell_of_ln_s(math.log1p(-x_p)))
            span = ell_p - float(self.ell[0])
            if span <= 0.0:
                return tail
            gaps = np.concatenate([[0.0], np.geomspace(min(1e-10, 1e-3 * span), span, _PROBE_PANELS)])
            edges = ell_p - gaps[::-1]
            nodes, weights = gauss_legendre(_PROBE_ORDER)
            width = np.diff(edges)
            ell_q = (edges[:-1, None] + width[:, None] * nodes).ravel()
            x_q = -np.expm1(self.ln_s_of_ell(ell_q))
            cw = np.exp(self.state.profile.ln_c0_d(np.exp(ell_q)) + ell_q + ln_scale)
            wq = (width[:, None] * weights).ravel()
            return float(wq @ (f(x_q) * cw)) + tail


_PROBE_PANELS = 48
_PROBE_ORDER = 10


def observe(state: CharacteristicState, pair: CoefficientPair, x_probes: Sequence[float] = (),
            kappa: float | None = None) -> Diagnostics:
    ens = _Ensemble(state, state.ln_s, _cusp_power(pair))
    if kappa is None:
        kappa = ens.kappa(pair)
    t = state.t
    mass = math.exp(t) * ens.mass_unscaled()
    b = state.support_end
    F0 = b - math.exp(ens.ell_star)
    ln_w_edge = float(state.profile.ln_w_d(math.exp(ens.ell_star)))
    w0t = math.exp(t + ln_w_edge)
    lm = _LabelMap(state, ens)
    # int x c dx / w(0, t), computed directly; integration by parts makes it 1 / w(0, t)
    mean_x = lm.integral_from(0.0, lambda xx: xx, -ln_w_edge)
    probes = tuple(float(v) for v in x_probes)
    beta = np.full(len(probes), np.nan)
    gk2 = np.full(len(probes), np.nan)
    if probes:
        beta[:], gk2[:] = _probe_values(state, pair, lm, kappa, probes)
    avg = _running_average(state)
    return Diagnostics(
        t=t, kappa=kappa, kappa_avg=avg, mass=mass, w0t=w0t, meanX=mean_x, F0=F0,
        probe_xs=probes, beta=beta, g=gk2, kappa_f1=_kappa_f1(state, pair, ens),
        mass_direct=_mass_direct(state, ens), n_active=ens.x.size,
        nodes_ordered=bool(np.all(np.diff(state.ln_s[ens.first:]) < 0.0)),
    )


def _probe_values(state, pair, lm: _LabelMap, kappa: float, probes):
    t = state.t
    beta = np.full(len(probes), np.nan)
    gk2 = np.full(len(probes), np.nan)
    x_max = 1.0 - math.exp(lm.ln_s_min)
    edge_x = None if state.edge_ln_s is None else -math.expm1(state.edge_ln_s)
    for k, xp in enumerate(probes):
        if xp < 0.0 or xp >= x_max or (edge_x is not None and xp >= edge_x):
            continue
        if xp < -math.expm1(lm.ln_s[-1]) and not lm._in_zone(xp):
            continue
        ell_p, jac = lm.locate(xp)
        if xp == 0.0 and lm.zone is not None:
            track = _boundary_track(state, t)
            if track is not None:
                # labels cross x = 0 at rate -v(0) d ell/dx
                v0 = float(_velocity(pair, np.array([0.0]), kappa)[0])
                ell_p = track[0]
                jac = v0 / (math.exp(ell_p) * track[1])
        delta_p = math.exp(ell_p)
        ln_w0 = float(state.profile.ln_w_d(delta_p))
        # everything is scaled by w0 at the probe, which may underflow on its own
        c_over_w = math.exp(float(state.profile.ln_c0_d(delta_p)) - ln_w0) / jac
        h_over_w = lm.integral_from(xp, lambda xx: xx - xp, -ln_w0)
        beta[k] = c_over_w * h_over_w
        php, psp = _values(pair, np.array([xp]))
        vp = float(php[0] - kappa * psp[0])
        if xp == 0.0 and pair.phi_superlinear_at_0:
            continue  # phi'(0) diverges, so g(0, t) is not finite
        gk2[k] = _decay_rate(pair, lm, kappa, xp, vp, h_over_w, -ln_w0)
    return beta, gk2


def _decay_rate(pair, lm: _LabelMap, kappa: float, xp: float, vp: float, h_scaled: float,
                ln_scale: float) -> float:
    """v'(x_p) - int (v - v_p) c / int (x - x_p) c, the decay rate of beta along characteristics."""
    dphi, dpsi = _slopes(pair, np.array([xp]))
    dv = float(dphi[0] - kappa * dpsi[0])
    num = lm.integral_from(xp, lambda xx: _velocity(pair, xx, kappa) - vp, ln_scale)
    return dv - num / h_scaled


def _kappa_f1(state: CharacteristicState, pair: CoefficientPair, ens: _Ensemble) -> float:
    """(int w + int phi' w) / (psi(0) w(0) + int psi' w) with w linear per cell.

    phi' and psi' are integrated exactly on each cell, so the rule stays
    finite when phi'(0) diverges.
    """
    x = np.concatenate([[0.0], ens.x])
    ln_w = np.concatenate([[float(state.profile.ln_w_d(math.exp(ens.ell_star)))], state.ln_w0[ens.first:]])
    w = np.exp(ln_w - ln_w[0])
    w_mid = 0.5 * (w[1:] + w[:-1])
    phi, psi = _values(pair, x)
    den = pair.psi_at_zero * w[0] + float(w_mid @ np.diff(psi))
    num = float(w_mid @ np.diff(x)) + float(w_mid @ np.diff(phi))
    return num / den if den > 0 else math.nan


def _mass_direct(state: CharacteristicState, ens: _Ensemble) -> float:
    """Simpson rule for w over the node positions in x.

    Independent of the label-space quadrature that the mass projection holds
    fixed, so it is the honest check on conservation.
    """
    x = np.concatenate([[0.0], ens.x])
    ln_w = np.concatenate([[float(state.profile.ln_w_d(math.exp(ens.ell_star)))], state.ln_w0[ens.first:]])
    keep = np.concatenate([[True], np.diff(x) > 0.0])
    x, ln_w = x[keep], ln_w[keep]
    w = np.exp(state.t + ln_w)
    return float(simpson_weights_uneven(x) @ w)


def _running_average(state: CharacteristicState) -> float:
    if len(state.kappa_t) < 2 or state.kappa_t[-1] <= 0:
        return state.kappa_v[-1] if state.kappa_v else math.nan
    t = np.asarray(state.kappa_t)
    k = np.asarray(state.kappa_v)
    return float(np.sum(0.5 * (k[1:] + k[:-1]) * np.diff(t)) / (t[-1] - t[0]))


# -- tracers for the beta transport identity ------------------------------------------------

@dataclass
class Tracer:
    """A stored characteristic with its sampled beta decay rate g(x(t), t)."""

    label_index_ell: float
    z: float
    beta0: float
    ts: list = field(default_factory=list)
    gs: list = field(default_factory=list)
    lost: bool = False  # g became unavailable, so the prediction is no longer defined

    def record(self, t: float, g: float | None) -> None:
        if self.lost:
            return
        if g is None:
            self.lost = True
            return
        self.ts.append(t)
        self.gs.append(g)

    @property
    def integral_g(self) -> float:
        if len(self.ts) < 2:
            return 0.0
        if len(self.ts) < 4:
            return float(np.trapz(self.gs, self.ts))
        return float(CubicSpline(self.ts, self.gs).integrate(self.ts[0], self.ts[-1]))


def _find_node(state: CharacteristicState, ell: float) -> int | None:
    hit = np.flatnonzero(np.abs(state.ell - ell) < 1e-12)
    return int(hit[0]) if hit.size else None


# -- driver ---------------------------------------------------------------------------------

@dataclass
class RunResult:
    series: list
    state: CharacteristicState
    tracers: list
    tracer_checks: list

    @property
    def kappa_history(self):
        return np.asarray(self.state.kappa_t), np.asarray(self.state.kappa_v)


def initial_state(profile: Profile, opts: SolverOptions | None = None) -> CharacteristicState:
    """Grid at t = 0, already refined at the front, ready for :func:`advance`."""
    opts = opts or SolverOptions()
    return _refine_front(init_grid(profile, opts.n, opts.s_floor), opts)


def run(profile: Profile, pair: CoefficientPair, t_end: float, opts: SolverOptions | None = None) -> RunResult:
    """Evolve from ``profile`` to ``t_end`` and observe at every ``cadence``."""
    opts = opts or SolverOptions()
    if not t_end > 0:
        raise ParameterError("t_end must be positive")
    state = initial_state(profile, opts)
    tracers = _make_tracers(state, opts.tracer_xs)
    series = [observe(state, pair, opts.probe_xs)]
    checks: list = []

    for tr, g0 in zip(tracers, _tracer_g(state, pair, tracers)):
        tr.record(0.0, g0)

    def on_step(old, new):
        if not tracers:
            return
        for tr, gn in zip(tracers, _tracer_g(new, pair, tracers)):
            tr.record(new.t, gn)

    n_chk = int(math.floor(t_end / opts.cadence + 1e-9))
    times = [opts.cadence * (k + 1) for k in range(n_chk)]
    if not times or times[-1] < t_end - 1e-9:
        times.append(t_end)
    for t_next in times:
        state = advance(state, pair, t_next, opts, on_step=on_step)
        series.append(observe(state, pair, opts.probe_xs))
        if tracers:
            checks.append(_tracer_check(state, pair, tracers))
    return RunResult(series=series, state=state, tracers=tracers, tracer_checks=checks)


def _make_tracers(state: CharacteristicState, xs) -> list:
    out = []
    b = state.support_end
    for x in xs:
        if not (0.0 <= x < b):
            continue
        i = int(np.argmin(np.abs((b - state.delta) - x)))
        d = float(state.delta[i])
        out.append(Tracer(label_index_ell=float(state.ell[i]), z=b - d, beta0=float(state.profile.beta_d(d))))
    return out


def _tracer_g(state, pair, tracers):
    ens = _Ensemble(state, state.ln_s, _cusp_power(pair))
    kappa = ens.kappa(pair)
    lm = None
    out = []
    for tr in tracers:
        i = _find_node(state, tr.label_index_ell)
        if i is None or i < ens.first or ens.last - i < 4:
            out.append(None)
            continue
        lm = lm or _LabelMap(state, ens)
        xp = float(-math.expm1(state.ln_s[i]))
        ln_scale = -float(state.ln_w0[i])
        h_scaled = lm.integral_from(xp, lambda xx: xx - xp, ln_scale)
        vp = float(_velocity(pair, np.array([xp]), kappa)[0])
        out.append(_decay_rate(pair, lm, kappa, xp, vp, h_scaled, ln_scale))
    return out


def _tracer_check(state, pair, tracers) -> list:
    """Per tracer: (t, x, beta from the solution, beta predicted by transport)."""
    ens = _Ensemble(state, state.ln_s, _cusp_power(pair))
    kappa = ens.kappa(pair)
    lm = _LabelMap(state, ens)
    rows = []
    for tr in tracers:
        i = _find_node(state, tr.label_index_ell)
        if tr.lost or i is None or i < ens.first:
            continue
        x = float(-math.expm1(state.ln_s[i]))
        beta, _ = _probe_values(state, pair, lm, kappa, [x])
        rows.append((state.t, x, float(beta[0]), tr.beta0 * math.exp(-tr.integral_g)))
    return rows


# -- backward characteristic map -------------------------------------------------------------

def labels_at(state: CharacteristicState, pair: CoefficientPair, xs: Sequence[float]) -> np.ndarray:
    """F(x, t) read off the current nodes (no re-integration of the history)."""
    lm = _LabelMap(state, _Ensemble(state, state.ln_s, _cusp_power(pair)))
    b = state.support_end
    return np.array([b - math.exp(lm.locate(float(x))[0]) for x in xs])


def map_F_backward(state: CharacteristicState, pair: CoefficientPair, x: float, t: float | None = None) -> float:
    """F(x, t): initial position of the characteristic through x at time t."""
    t = state.t if t is None else float(t)
    if t == 0.0:
        return float(x)
    if not state.kappa_t or state.kappa_t[0] > 1e-12 or state.kappa_t[-1] < t - 1e-12:
        raise HistoryGapError("kappa history does not cover [0, t]")
    kappa_of_t = CubicSpline(np.asarray(state.kappa_t), np.asarray(state.kappa_v))

    def rhs(tt, y):
        s = np.exp(y)
        p, q = _rates(pair, s)
        return kappa_of_t(tt) * q - p

    sol = solve_ivp(rhs, (t, 0.0), [math.log1p(-x)], method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise DegenerateStateError(sol.message)
    return float(-math.expm1(sol.y[0, -1]))
