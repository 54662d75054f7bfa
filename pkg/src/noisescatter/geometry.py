"""Conformally Euclidean metric on the plane, geodesics and the scattering relation.

The metric is g = a(x) * identity with a compactly supported Gaussian bump,

    a(x) = 1 + A exp(-|x - x0|^2 / w^2) * taper(|x - c|),

where the taper switches the bump off smoothly before the Euclidean radius R_E.
The domain M is the closed disk |x - c| <= R.  Geodesics are integrated in
Hamiltonian form (x, p) with p = a * xdot the covector of the velocity.
"""
from dataclasses import dataclass, field
import csv

import numpy as np

from .cutoffs import smooth_step, smooth_step_d1
from . import _raykernels as rk


class Trapped(RuntimeError):
    """A geodesic failed to leave the domain before the step cap."""


@dataclass(frozen=True)
class Metric:
    amplitude: float = 0.0
    bump_center: tuple = (0.0, 0.0)
    width: float = 0.35
    radius: float = 1.0
    center: tuple = (0.0, 0.0)
    euclid_radius: float = 0.8
    taper_width: float = 0.3

    def __post_init__(self):
        if self.width <= 0 or self.radius <= 0:
            raise ValueError("width and radius must be positive")
        if not 0 < self.taper_width < self.euclid_radius:
            raise ValueError("taper_width must lie in (0, euclid_radius)")
        if self.euclid_radius >= self.radius:
            raise ValueError("the bump must be compactly supported inside M")

    @property
    def params(self):
        return np.array([self.amplitude, self.bump_center[0], self.bump_center[1],
                         self.width ** 2, self.center[0], self.center[1],
                         self.taper_start, self.taper_width], dtype=float)

    @property
    def taper_start(self):
        return self.euclid_radius - self.taper_width

    def background(self):
        """The known reference metric g0 (a == 1 everywhere)."""
        return Metric(amplitude=0.0, bump_center=self.bump_center, width=self.width,
                      radius=self.radius, center=self.center,
                      euclid_radius=self.euclid_radius, taper_width=self.taper_width)

    @property
    def is_euclidean(self):
        return self.amplitude == 0.0

    # -- conformal factor ---------------------------------------------------

    def conformal_factor(self, x, xp=np):
        """a(x) for points of shape (..., 2); `xp` may be numpy or jax.numpy."""
        x0 = xp.asarray(self.bump_center)
        c = xp.asarray(self.center)
        d2 = xp.sum((x - x0) ** 2, axis=-1)
        r = xp.sqrt(xp.sum((x - c) ** 2, axis=-1))
        taper = 1.0 - smooth_step((r - self.taper_start) / self.taper_width, xp)
        return 1.0 + self.amplitude * xp.exp(-d2 / self.width ** 2) * taper

    def a(self, x):
        return self.conformal_factor(np.asarray(x, dtype=float))

    def grad_a(self, x):
        x = np.asarray(x, dtype=float)
        x0 = np.asarray(self.bump_center)
        c = np.asarray(self.center)
        diff = x - x0
        gauss = np.exp(-np.sum(diff ** 2, axis=-1) / self.width ** 2)
        rel = x - c
        r = np.sqrt(np.sum(rel ** 2, axis=-1))
        s = (r - self.taper_start) / self.taper_width
        taper = 1.0 - smooth_step(s)
        dtaper_dr = -smooth_step_d1(s) / self.taper_width
        rhat = rel / np.maximum(r, 1e-300)[..., None]
        grad_gauss = -2.0 * diff / self.width ** 2 * gauss[..., None]
        return self.amplitude * (grad_gauss * taper[..., None]
                                 + gauss[..., None] * dtaper_dr[..., None] * rhat)

    def metric_eval(self, x):
        """Return (g, g_inv, sqrt|g|, Christoffel) at x.

        Christoffel symbols are indexed gamma[..., k, i, j] = Gamma^k_ij.
        """
        x = np.asarray(x, dtype=float)
        a = self.a(x)
        da = self.grad_a(x)
        eye = np.eye(2)
        g = a[..., None, None] * eye
        g_inv = (1.0 / a)[..., None, None] * eye
        # Gamma^k_ij = (delta_ki d_j a + delta_kj d_i a - delta_ij d_k a) / (2a)
        gam = (np.einsum("ki,...j->...kij", eye, da)
               + np.einsum("kj,...i->...kij", eye, da)
               - np.einsum("ij,...k->...kij", eye, da))
        gam = gam / (2.0 * a)[..., None, None, None]
        return g, g_inv, a, gam

    # -- boundary parametrisation -------------------------------------------

    @property
    def circumference(self):
        return 2.0 * np.pi * self.radius

    def boundary_point(self, s):
        phi = np.asarray(s, dtype=float) / self.radius
        c = np.asarray(self.center)
        return c + self.radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)

    def inward_normal(self, s):
        phi = np.asarray(s, dtype=float) / self.radius
        return -np.stack([np.cos(phi), np.sin(phi)], axis=-1)

    def arclength(self, x):
        rel = np.asarray(x, dtype=float) - np.asarray(self.center)
        return np.mod(np.arctan2(rel[..., 1], rel[..., 0]), 2 * np.pi) * self.radius

    def angle_to_inward_normal(self, x, direction):
        """Signed angle (counterclockwise) from the inward normal at x to `direction`."""
        nu = self.inward_normal(self.arclength(x))
        d = np.asarray(direction, dtype=float)
        cross = nu[..., 0] * d[..., 1] - nu[..., 1] * d[..., 0]
        dot = np.sum(nu * d, axis=-1)
        return np.arctan2(cross, dot)


def rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    v = np.asarray(v, dtype=float)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


@dataclass(frozen=True)
class PhasePoint:
    """Base point x with velocity xi; on SM, |xi|_g = 1."""
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))

    def norm_g(self, metric):
        return float(np.sqrt(metric.a(self.x)) * np.linalg.norm(self.xi))

    def normalized(self, metric):
        return PhasePoint(self.x, self.xi / self.norm_g(metric))

    def flat(self, metric):
        """Covector xi^flat = a * xi."""
        return metric.a(self.x) * self.xi

    def reversed(self):
        return PhasePoint(self.x, -self.xi)


def boundary_phase_point(metric, s, angle):
    """Unit inward vector at arclength s, rotated by `angle` from the inward normal."""
    x = metric.boundary_point(s)
    d = rotate(metric.inward_normal(s), angle)
    return PhasePoint(x, d / np.sqrt(metric.a(x)))


@dataclass(frozen=True)
class ScatteringRecord:
    entry: PhasePoint
    tau: float
    exit: PhasePoint

    def row(self, metric):
        return {
            "entry_s": float(metric.arclength(self.entry.x)),
            "entry_angle": float(metric.angle_to_inward_normal(self.entry.x, self.entry.xi)),
            "tau": float(self.tau),
            "exit_s": float(metric.arclength(self.exit.x)),
            # reversed exit direction lies in the inward bundle
            "exit_angle": float(metric.angle_to_inward_normal(self.exit.x, -self.exit.xi)),
        }


# -- Hamiltonian flow -------------------------------------------------------

def _rhs(metric, x, p):
    a = metric.a(x)
    da = metric.grad_a(x)
    pp = np.sum(p * p, axis=-1)
    xdot = p / a[..., None]
    pdot = (0.5 * pp / a ** 2)[..., None] * da
    return xdot, pdot


def rk4_step(metric, x, p, dt):
    """One classical RK4 step of the geodesic flow; dt may be an array."""
    dt = np.asarray(dt, dtype=float)
    if dt.ndim:
        dt = dt[..., None]
    k1x, k1p = _rhs(metric, x, p)
    k2x, k2p = _rhs(metric, x + 0.5 * dt * k1x, p + 0.5 * dt * k1p)
    k3x, k3p = _rhs(metric, x + 0.5 * dt * k2x, p + 0.5 * dt * k2p)
    k4x, k4p = _rhs(metric, x + dt * k3x, p + dt * k3p)
    x_new = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    p_new = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return x_new, p_new


def default_t_max(metric):
    return 50.0 * 2.0 * metric.radius


def geodesic_trace(metric, start, dt=1e-3, t_max=None, max_steps=2_000_000):
    """Integrate the geodesic from `start` on [0, t_max].

    Returns (times, positions, velocities).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_max is None:
        t_max = default_t_max(metric)
    n = int(np.ceil(t_max / dt - 1e-9))
    if n > max_steps:
        raise OverflowError(f"{n} steps exceed the cap of {max_steps}")
    out = rk.trace(float(start.x[0]), float(start.x[1]), float(start.xi[0]),
                   float(start.xi[1]), float(dt), n, metric.params)
    xs, ps = out[:, :2], out[:, 2:]
    times = dt * np.arange(n + 1)
    return times, xs, ps / metric.a(xs)[:, None]


def _exit_batch(metric, x0, v0, radius, dt, t_max, tol=None):
    """First exit of |x - c| = radius for rays (x0, v0); returns (tau, x, v, trapped)."""
    x = np.array(x0, dtype=float, ndmin=2)
    v = np.array(v0, dtype=float, ndmin=2)
    if tol is None:
        tol = 1e-9 * radius
    tau, out, trapped = rk.exit_rays(np.ascontiguousarray(x), np.ascontiguousarray(v),
                                     float(radius), float(dt), float(t_max), float(tol),
                                     metric.params)
    x_out = out[:, :2]
    v_out = out[:, 2:] / metric.a(np.nan_to_num(x_out))[:, None]
    return tau, x_out, v_out, trapped


def exit_time(metric, entry, dt=1e-3, t_max=None):
    if t_max is None:
        t_max = default_t_max(metric)
    tau, _, _, trapped = _exit_batch(metric, entry.x, entry.xi, metric.radius, dt, t_max)
    if trapped[0]:
        raise Trapped(f"no exit before t = {t_max}")
    return float(tau[0])


def _check_inward(metric, entry):
    nu = metric.inward_normal(metric.arclength(entry.x))
    if float(np.dot(nu, entry.xi)) <= 0:
        raise ValueError("entry direction must point into M")


def scattering_relation(metric, entry, dt=1e-3, t_max=None):
    _check_inward(metric, entry)
    if t_max is None:
        t_max = default_t_max(metric)
    tau, xe, ve, trapped = _exit_batch(metric, entry.x, entry.xi, metric.radius, dt, t_max)
    if trapped[0]:
        raise Trapped(f"no exit before t = {t_max}")
    return ScatteringRecord(entry, float(tau[0]), PhasePoint(xe[0], ve[0]))


def scattering_table(metric, s_values, angles, dt=1e-3, t_max=None):
    """Vectorised scattering relation over all (s, angle) pairs."""
    if t_max is None:
        t_max = default_t_max(metric)
    S, Ang = np.meshgrid(np.asarray(s_values, float), np.asarray(angles, float), indexing="ij")
    S, Ang = S.ravel(), Ang.ravel()
    x = metric.boundary_point(S)
    d = rotate(metric.inward_normal(S), Ang) / np.sqrt(metric.a(x))[:, None]
    tau, xe, ve, trapped = _exit_batch(metric, x, d, metric.radius, dt, t_max)
    if np.any(trapped):
        raise Trapped(f"{int(trapped.sum())} geodesics did not exit")
    return [ScatteringRecord(PhasePoint(x[i], d[i]), float(tau[i]), PhasePoint(xe[i], ve[i]))
            for i in range(len(S))]


def write_scattering_csv(path, metric, records):
    cols = ["entry_s", "entry_angle", "tau", "exit_s", "exit_angle"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for rec in records:
            wr.writerow({k: f"{v:.10g}" for k, v in rec.row(metric).items()})


def max_chord_length(metric, radius, n_s=24, n_angle=24, dt=5e-3):
    """Longest geodesic segment inside the disk of the given radius (sweep estimate)."""
    s = np.linspace(0, 2 * np.pi * radius, n_s, endpoint=False)
    ang = np.linspace(-np.pi / 2, np.pi / 2, n_angle + 2)[1:-1]
    S, A = np.meshgrid(s, ang, indexing="ij")
    phi = S.ravel() / radius
    c = np.asarray(metric.center)
    x = c + radius * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    nu = -np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    d = rotate(nu, A.ravel()) / np.sqrt(metric.a(x))[:, None]
    tau, _, _, trapped = _exit_batch(metric, x, d, radius, dt, default_t_max(metric))
    if np.any(trapped):
        raise Trapped("geodesic sweep hit the step cap")
    return float(np.max(tau))


# -- assumption checks ------------------------------------------------------

@dataclass
class AssumptionReport:
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.violations


def boundary_geodesic_curvature(metric, s):
    """Geodesic curvature of the boundary circle w.r.t. g (positive = convex)."""
    x = metric.boundary_point(s)
    a = metric.a(x)
    rhat = -metric.inward_normal(s)
    dr_log_a = np.sum(metric.grad_a(x) * rhat, axis=-1) / a
    return (1.0 / metric.radius + 0.5 * dr_log_a) / np.sqrt(a)


def _tau_for_angles(metric, s, angles, dt, t_max):
    x = metric.boundary_point(np.full_like(angles, s))
    d = rotate(metric.inward_normal(np.full_like(angles, s)), angles)
    d = d / np.sqrt(metric.a(x))[:, None]
    tau, _, _, trapped = _exit_batch(metric, x, d, metric.radius, dt, t_max)
    return np.where(trapped, np.inf, tau)


def _divergent_exit(metric, s, lo, hi, dt, t_max, iterations=60):
    """Golden-section maximisation of tau(angle); True if tau keeps growing."""
    g = (np.sqrt(5) - 1) / 2
    history = []
    a, b = lo, hi
    for _ in range(iterations):
        c1 = b - g * (b - a)
        c2 = a + g * (b - a)
        t1, t2 = _tau_for_angles(metric, s, np.array([c1, c2]), dt, t_max)
        if not np.isfinite(max(t1, t2)):
            return True, float("inf")
        if t1 > t2:
            b = c2
        else:
            a = c1
        history.append(max(t1, t2))
    gain = history[-1] - history[-21]
    return gain > 0.1, history[-1]


def check_assumptions(metric, n_s=32, n_angle=16, box_half_width=3.0, dt=5e-3,
                      inward_floor=0.1, refine_trapping=True):
    """Check non-trapping (A1), strict convexity (A2) and Euclidean exterior (A3)."""
    rep = AssumptionReport()
    t_max = default_t_max(metric)
    s_vals = np.linspace(0, metric.circumference, n_s, endpoint=False)
    amax = np.arccos(inward_floor)
    angles = np.linspace(-amax, amax, n_angle)

    trapped_dirs = []
    tau_grid = np.empty((n_s, n_angle))
    for i, s in enumerate(s_vals):
        tau_grid[i] = _tau_for_angles(metric, s, angles, dt, t_max)
        for k in np.nonzero(~np.isfinite(tau_grid[i]))[0]:
            trapped_dirs.append((float(s), float(angles[k])))
    if refine_trapping and not metric.is_euclidean:
        for i, s in enumerate(s_vals):
            row = tau_grid[i]
            for k in range(1, n_angle - 1):
                if np.isfinite(row[k]) and row[k] >= row[k - 1] and row[k] >= row[k + 1]:
                    divergent, tau_peak = _divergent_exit(
                        metric, s, angles[k - 1], angles[k + 1], dt, t_max)
                    if divergent:
                        trapped_dirs.append((float(s), float(angles[k])))
            if trapped_dirs:
                break
    rep.details["max_exit_time"] = float(np.max(tau_grid[np.isfinite(tau_grid)], initial=0.0))
    rep.details["trapped_directions"] = trapped_dirs
    if trapped_dirs:
        rep.violations.append("A1")

    kappa = boundary_geodesic_curvature(metric, np.linspace(0, metric.circumference, 256,
                                                            endpoint=False))
    rep.details["min_boundary_curvature"] = float(kappa.min())
    if np.any(kappa <= 0):
        rep.violations.append("A2")

    rng = np.random.default_rng(0)
    r = metric.euclid_radius + (box_half_width * np.sqrt(2) - metric.euclid_radius) * rng.random(4096)
    phi = 2 * np.pi * rng.random(4096)
    pts = np.asarray(metric.center) + r[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    dev = float(np.max(np.abs(metric.a(pts) - 1.0)))
    rep.details["exterior_deviation"] = dev
    if dev != 0.0:
        rep.violations.append("A3")
    return rep
