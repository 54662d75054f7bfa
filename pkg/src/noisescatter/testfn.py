"""Oscillating boundary test functions.

    psi_eps(t, x) = conj(exp(i theta~(t, x) / eps)) chi_psi(t, x)
    theta~(t, x)  = q.(x - mu(t)) + i |x - mu(t)|^2,   mu(t) = y + (t - s) eta

mu is a straight line regardless of the metric; psi is only a test function.
"""
from dataclasses import dataclass

import numpy as np

from .cutoffs import plateau


class MultiCross(ValueError):
    """The line mu(t) meets the boundary twice inside the time support."""


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    s: float
    y: tuple
    eta: tuple
    q: tuple
    r_t: float
    r_x: float

    @property
    def pt(self):
        return (self.s, np.asarray(self.y), np.asarray(self.eta))

    def mu(self, t):
        t = np.asarray(t, dtype=float)
        return np.asarray(self.y) + (t - self.s)[..., None] * np.asarray(self.eta)

    def cutoff(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        dx = np.linalg.norm(x - np.asarray(self.y), axis=-1)
        return plateau(np.abs(t - self.s), 0.5 * self.r_t, self.r_t) * plateau(dx, 0.5 * self.r_x, self.r_x)

    def theta(self, t, x):
        diff = np.asarray(x, dtype=float) - self.mu(t)
        return diff @ np.asarray(self.q) + 1j * np.sum(diff * diff, axis=-1)

    def evaluate(self, t, x, eps, conjugate=True):
        """psi_eps(t, x); conjugate=False gives exp(+i theta~/eps) chi_psi instead."""
        t, x = np.broadcast_arrays(np.asarray(t, float)[..., None], np.asarray(x, float))
        t = t[..., 0]
        diff = x - self.mu(t)
        phase = diff @ np.asarray(self.q)
        if conjugate:
            phase = -phase
        val = np.exp(1j * phase / eps - np.sum(diff * diff, axis=-1) / eps)
        return val * self.cutoff(t, x)


def second_crossing(metric, y, eta):
    """Time after s at which the line y + t eta leaves the disk M again (inf if never)."""
    c = np.asarray(metric.center)
    rel = np.asarray(y, float) - c
    eta = np.asarray(eta, float)
    aa = float(eta @ eta)
    b = float(rel @ eta)
    cc = float(rel @ rel) - metric.radius ** 2
    disc = b * b - aa * cc
    if disc <= 0:
        return np.inf
    roots = np.array([(-b - np.sqrt(disc)) / aa, (-b + np.sqrt(disc)) / aa])
    ahead = roots[roots > 1e-9]
    return float(ahead.min()) if ahead.size else np.inf


def _crossings(metric, tf, n=4001):
    """Count sign changes of |mu(t)| - R over the time support."""
    t = np.linspace(tf.s - tf.r_t, tf.s + tf.r_t, n)
    f = np.linalg.norm(tf.mu(t) - np.asarray(metric.center), axis=-1) - metric.radius
    sgn = np.sign(f)
    sgn[sgn == 0] = 1
    return int(np.count_nonzero(np.diff(sgn)))


def make_test(metric, pt, r_t=0.3, r_x=None, T=None, inward_floor=0.1):
    """Build psi for pt = (s, y, eta); y on the boundary, eta unit and inward."""
    s, y, eta = pt
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if r_x is None:
        r_x = 0.3 * metric.radius
    nu = -(y - np.asarray(metric.center)) / np.linalg.norm(y - np.asarray(metric.center))
    if abs(np.linalg.norm(y - np.asarray(metric.center)) - metric.radius) > 1e-8:
        raise ValueError("y must lie on the boundary")
    if abs(np.sqrt(metric.a(y)) * np.linalg.norm(eta) - 1.0) > 1e-8:
        raise ValueError("eta must be a unit vector")
    if float(nu @ eta) < inward_floor:
        raise ValueError(f"eta is not inward enough: (nu, eta) = {float(nu @ eta):.3f} < {inward_floor}")
    q = metric.a(y) * eta

    for attempt in range(2):
        if T is not None and not (1.0 + r_t < s < T - r_t):
            raise ValueError(f"s = {s} must lie in (1 + r_t, T - r_t)")
        tf = TestFunction(float(s), tuple(y), tuple(eta), tuple(q), float(r_t), float(r_x))
        if second_crossing(metric, y, eta) > r_t and _crossings(metric, tf) == 1:
            return tf
        r_t = 0.5 * min(r_t, second_crossing(metric, y, eta))
    raise MultiCross(f"support radius {r_t:.3f} still crosses the boundary twice")


def boundary_mass(metric, tf, eps, n_t=None, n_l=None, half_width=None):
    """L^2((0,T) x boundary) norm squared of psi, plus the fraction within 10 sqrt(eps) of (s, y)."""
    if half_width is None:
        half_width = min(tf.r_t, 12 * np.sqrt(eps))
    n = n_t or max(201, int(40 * half_width / np.sqrt(eps)))
    t = np.linspace(tf.s - half_width, tf.s + half_width, n)
    s0 = metric.arclength(np.asarray(tf.y))
    ls = np.linspace(s0 - half_width, s0 + half_width, n_l or n)
    pts = metric.boundary_point(ls)
    tt, idx = np.meshgrid(t, np.arange(len(ls)), indexing="ij")
    vals = tf.evaluate(tt, pts[idx], eps)
    dens = np.abs(vals) ** 2
    dt = t[1] - t[0]
    dl = ls[1] - ls[0]
    total = float(np.sum(dens) * dt * dl)
    dist = np.sqrt((tt - tf.s) ** 2 + np.linalg.norm(pts[idx] - np.asarray(tf.y), axis=-1) ** 2)
    near = float(np.sum(dens[dist <= 10 * np.sqrt(eps)]) * dt * dl)
    return total, near / total if total > 0 else 0.0
