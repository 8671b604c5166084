"""Small quadrature helpers shared by several modules.

Everything here works on numpy arrays and fixed Gauss-Legendre rules, which
is what the singular-but-integrable integrands of this package need once the
singular part has been split off analytically.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=16)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def integrate_panels(fun, edges: np.ndarray, order: int = 16) -> np.ndarray:
    """Integral of ``fun`` over each panel ``[edges[k], edges[k+1]]``.

    ``fun`` must accept a 2-D array and return an array of the same shape.
    """
    edges = np.asarray(edges, dtype=float)
    nodes, weights = gauss_legendre(order)
    a = edges[:-1, None]
    b = edges[1:, None]
    pts = a + (b - a) * nodes[None, :]
    vals = fun(pts)
    return ((b - a)[:, 0]) * (vals @ weights)


def integrate_between(fun, a, b, order: int = 16) -> np.ndarray:
    """Vectorised integral of ``fun`` from ``a`` to ``b`` (arrays broadcast)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    nodes, weights = gauss_legendre(order)
    pts = a[..., None] + (b - a)[..., None] * nodes
    vals = fun(pts)
    return (b - a) * (vals @ weights)


class CumulativeIntegral:
    """Running integral ``I(t) = int_{t0}^{t} f`` on a fixed set of breakpoints.

    The breakpoints should be placed so that ``f`` is smooth on every panel;
    evaluation between breakpoints adds one partial Gauss-Legendre panel.
    """

    def __init__(self, fun, breakpoints, order: int = 16):
        self.fun = fun
        self.order = order
        self.edges = np.asarray(breakpoints, dtype=float)
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        panels = integrate_panels(fun, self.edges, order)
        self.cumulative = np.concatenate([[0.0], np.cumsum(panels)])

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t).ravel()
        idx = np.clip(np.searchsorted(self.edges, flat, side="right") - 1, 0, len(self.edges) - 2)
        left = self.edges[idx]
        out = self.cumulative[idx] + integrate_between(self.fun, left, flat, self.order)
        return out.reshape(t.shape) if t.ndim else float(out[0])


def simpson_weights(m: int) -> np.ndarray:
    """Composite Simpson weights for ``m`` equally spaced samples (unit spacing).

    An odd number of intervals is closed with the 3/8 rule on the last three.
    """
    if m < 2:
        return np.zeros(m)
    if m == 2:
        return np.array([0.5, 0.5])
    if m == 3:
        return np.array([1.0, 4.0, 1.0]) / 3.0
    w = np.zeros(m)
    intervals = m - 1
    simpson_end = m if intervals % 2 == 0 else m - 3
    if simpson_end >= 3:
        w[0:simpson_end:2] += 2.0 / 3.0
        w[1:simpson_end:2] += 4.0 / 3.0
        w[0] -= 1.0 / 3.0
        w[simpson_end - 1] -= 1.0 / 3.0
    if intervals % 2 == 1:
        w[m - 4 : m] += np.array([3.0, 9.0, 9.0, 3.0]) / 8.0
    return w


def simpson_weights_uneven(x: np.ndarray) -> np.ndarray:
    """Composite Simpson weights for samples at monotone, unevenly spaced ``x``.

    Pairs of intervals use the three-point rule that is exact for quadratics;
    an odd final interval is closed with the quadratic through the last three
    samples. Weights are positive multiples of |dx| whatever the direction.
    """
    x = np.asarray(x, dtype=float)
    m = x.size
    w = np.zeros(m)
    if m < 2:
        return w
    h = np.abs(np.diff(x))
    if m == 2:
        return 0.5 * np.array([h[0], h[0]])
    n_pairs = (m - 1) // 2
    h0 = h[0 : 2 * n_pairs : 2]
    h1 = h[1 : 2 * n_pairs : 2]
    hs = h0 + h1
    w0 = hs / 6.0 * (2.0 - h1 / h0)
    w1 = hs / 6.0 * hs * hs / (h0 * h1)
    w2 = hs / 6.0 * (2.0 - h0 / h1)
    np.add.at(w, np.arange(0, 2 * n_pairs, 2), w0)
    np.add.at(w, np.arange(1, 2 * n_pairs, 2), w1)
    np.add.at(w, np.arange(2, 2 * n_pairs + 1, 2), w2)
    if (m - 1) % 2 == 1:
        a, b = h[-2], h[-1]
        w[-1] += (2.0 * b * b + 3.0 * a * b) / (6.0 * (a + b))
        w[-2] += (b * b + 3.0 * a * b) / (6.0 * a)
        w[-3] -= b**3 / (6.0 * a * (a + b))
    return w
