"""Formal Gaussian beams along geodesics of the conformal metric.

A beam is described by jets along its ray gamma(t):

    theta(t, x) = p.y + 1/2 y.H.y + 1/6 C[y, y, y],     y = x - gamma(t)
    A(t, x)     = u0 + v.y
    U_eps(t, x) = chi_U(t, x) exp(i theta / eps) A(t, x)

The jets are propagated with the Hamiltonian G(x, q) = |q| / sqrt(a(x)), for
which theta_t + G(x, grad theta) = 0 is the eikonal equation.  Writing
F(y) = G(gamma + y, grad theta(gamma + y)), each jet evolves as
d/dt (k-th jet) = -(k-th derivative of F at 0) with the (k+1)-th jet dropped.
For k = 2 this is the matrix Riccati equation, integrated through its linear
(Y, Z) form with H = Y Z^-1.  The amplitude jet solves the transport equation
to first order in y.
"""
from dataclasses import dataclass, field
from functools import partial
import csv
import os

import numpy as np
from scipy.interpolate import CubicSpline

import jax
import jax.numpy as jnp

from .cutoffs import plateau, smooth_step
from .geometry import PhasePoint, exit_time

jax.config.update("jax_enable_x64", True)
# the jet integrator takes ~25 s to compile; keep compiled code between processes
jax.config.update("jax_compilation_cache_dir",
                  os.environ.get("NOISESCATTER_JAX_CACHE",
                                 os.path.join(os.path.expanduser("~"), ".cache", "noisescatter-jax")))
jax.config.update("jax_persistent_cache_min_compile_time_secs", 1.0)


class MissesM(ValueError):
    """The backward ray from the anchor point never enters M."""


class DegenerateZ(RuntimeError):
    """det Z fell below the degeneracy floor during Riccati propagation."""


class AmplitudeUnderflow(RuntimeError):
    """The principal amplitude collapsed towards zero."""


class SupportTouchesM(ValueError):
    """The beam cutoff at the final time reaches into M."""


@dataclass(frozen=True)
class BeamAnchor:
    """pgb = (T, z, zeta): end time, exterior point, and backward direction."""
    T: float
    z: tuple
    zeta: tuple


@dataclass
class BeamSkeleton:
    metric: object
    anchor: BeamAnchor
    H_T: np.ndarray
    t_hit: float          # backward travel time from z to the boundary
    tau: float            # travel time through M
    hit_point: np.ndarray  # where the backward ray meets the boundary
    hit_dir: np.ndarray    # backward ray direction there (inward)

    @property
    def exit_time(self):
        """Beam time at which gamma_U leaves M."""
        return self.anchor.T - self.t_hit

    @property
    def entry_time(self):
        """Beam time at which gamma_U enters M."""
        return self.anchor.T - self.t_hit - self.tau


def init_beam(metric, anchor, H_T=None):
    z = np.asarray(anchor.z, dtype=float)
    zeta = np.asarray(anchor.zeta, dtype=float)
    c = np.asarray(metric.center)
    if np.linalg.norm(z - c) <= metric.radius:
        raise ValueError("anchor point must lie outside M")
    if abs(np.sqrt(metric.a(z)) * np.linalg.norm(zeta) - 1.0) > 1e-10:
        raise ValueError("zeta must be a unit vector for g")
    if H_T is None:
        H_T = focusing_H(metric, z, zeta)
    H_T = np.asarray(H_T, dtype=complex)
    if np.linalg.norm(H_T - H_T.T) > 1e-12 or np.min(np.linalg.eigvalsh(H_T.imag)) <= 0:
        raise ValueError("H_T must be symmetric with positive definite imaginary part")
    # the metric is Euclidean outside M, so the backward ray is straight until it hits
    d = zeta / np.linalg.norm(zeta)
    rel = z - c
    b = float(np.dot(rel, d))
    disc = b * b - (float(np.dot(rel, rel)) - metric.radius ** 2)
    if disc <= 0 or -b - np.sqrt(disc) <= 0:
        raise MissesM(f"ray from {z} along {d} does not enter M")
    t_hit = (-b - np.sqrt(disc)) / float(np.linalg.norm(zeta))
    hit = z + t_hit * zeta
    tau = exit_time(metric, PhasePoint(hit, zeta))
    return BeamSkeleton(metric, anchor, H_T, float(t_hit), float(tau), hit, zeta.copy())


def focusing_H(metric, z, zeta, waist=1.0, focus=None):
    """Final Hessian whose free-space evolution has its waist at the middle of M.

    Transversally H(s) = 1/(s_c - s - i waist) in Euclidean space, where s is the
    backward travel time and s_c the time to the chord midpoint (or to the
    projection of `focus` on the ray); longitudinally
    H stays i.  Inside M the metric perturbs this but keeps Im H of order one.
    """
    z = np.asarray(z, float)
    d = np.asarray(zeta, float) / np.linalg.norm(zeta)
    n = np.array([-d[1], d[0]])
    s_c = float(np.dot(np.asarray(metric.center if focus is None else focus) - z, d))
    h_perp = 1.0 / (s_c - 1j * waist)
    return 1j * np.outer(d, d) + h_perp * np.outer(n, n)


# -- jet dynamics -------------------------------------------------------------

def _a_jax(x, prm):
    """Conformal factor from the packed metric parameters (jax, differentiable at the centre)."""
    amp, x0x, x0y, w2, cx, cy, t0, tw = [prm[i] for i in range(8)]
    d2 = (x[0] - x0x) ** 2 + (x[1] - x0y) ** 2
    r2 = (x[0] - cx) ** 2 + (x[1] - cy) ** 2
    r = jnp.sqrt(jnp.where(r2 > 1e-30, r2, 1.0))
    r = jnp.where(r2 > 1e-30, r, 0.0)
    taper = 1.0 - smooth_step((r - t0) / tw, jnp)
    return 1.0 + amp * jnp.exp(-d2 / w2) * taper


def _hamiltonian(x, q, prm):
    return jnp.sqrt(jnp.dot(q, q) / _a_jax(x, prm))


def _make_rhs(phase_order, amplitude_order, frozen_H):
    def G4(xq, prm):
        return _hamiltonian(xq[:2], xq[2:], prm)

    dG = jax.grad(G4)
    d2G = jax.hessian(G4)
    da_fn = jax.grad(_a_jax)

    def F(y, gamma, p, H, C, prm):
        q = p + H @ y + 0.5 * jnp.einsum("ijk,j,k->i", C, y, y)
        return _hamiltonian(gamma + y, q, prm)

    d3F = jax.jacfwd(jax.jacfwd(jax.jacfwd(F)))

    def rhs(state, prm):
        gamma, p, Y, Z, C, u0, v = state
        H = Y @ jnp.linalg.inv(Z)
        xq = jnp.concatenate([gamma, p])
        g1 = dG(xq, prm)
        g2 = d2G(xq, prm)
        Gx, Gq = g1[:2], g1[2:]
        Gxx, Gxq, Gqq = g2[:2, :2], g2[:2, 2:], g2[2:, 2:]
        Gqx = Gxq.T
        gdot = Gq
        pdot = -Gx
        Zdot = Gqx @ Z + Gqq @ Y
        if frozen_H:
            Ydot = H @ Zdot
            Hdot = jnp.zeros((2, 2), dtype=H.dtype)
        else:
            Ydot = -Gxx @ Z - Gxq @ Y
            Hdot = -(Gxx + Gxq @ H + H @ Gqx + H @ Gqq @ H)
        if phase_order >= 3:
            Cdot = -d3F(jnp.zeros(2), gamma, p, H, C, prm)
        else:
            Cdot = jnp.zeros_like(C)
        pddot = -(Gxx @ gdot + Gxq @ pdot)
        gddot = Gqx @ gdot + Gqq @ pdot

        a = _a_jax(gamma, prm)
        grad_inv_a = -da_fn(gamma, prm) / a ** 2
        th_t0 = -jnp.dot(p, gdot)
        th_t1 = pdot - H @ gdot
        th_tt0 = -2 * jnp.dot(pdot, gdot) - jnp.dot(p, gddot) + gdot @ H @ gdot
        th_tt1 = pddot - 2 * Hdot @ gdot - H @ gddot + jnp.einsum("ijk,i,j->k", C, gdot, gdot)
        trH = jnp.trace(H)
        trC = jnp.einsum("iik->k", C)
        # transport: zero-th and first order in y of
        #   2 theta_t A_t - 2/a grad(theta).grad(A) + (theta_tt - lap(theta)/a) A
        r0 = -(2 / a) * jnp.dot(p, v) + (th_tt0 - trH / a) * u0
        u0dot = jnp.dot(v, gdot) - r0 / (2 * th_t0)
        if amplitude_order >= 1:
            r1 = (2 * th_t1 * (u0dot - jnp.dot(v, gdot))
                  - 2 * grad_inv_a * jnp.dot(p, v) - (2 / a) * H @ v
                  + (th_tt1 - grad_inv_a * trH - trC / a) * u0
                  + (th_tt0 - trH / a) * v)
            vdot = -r1 / (2 * th_t0)
        else:
            vdot = jnp.zeros_like(v)
        return (gdot, pdot, Ydot, Zdot, Cdot, u0dot, vdot)

    return rhs


@partial(jax.jit, static_argnums=(0, 4))
def _integrate(rhs, state0, dt, prm, n):
    def add(s, k, h):
        return tuple(si + h * ki for si, ki in zip(s, k))

    def step(state, _):
        k1 = rhs(state, prm)
        k2 = rhs(add(state, k1, 0.5 * dt), prm)
        k3 = rhs(add(state, k2, 0.5 * dt), prm)
        k4 = rhs(add(state, k3, dt), prm)
        new = tuple(s + dt / 6 * (a + 2 * b + 2 * c + d)
                    for s, a, b, c, d in zip(state, k1, k2, k3, k4))
        return new, new

    _, traj = jax.lax.scan(step, state0, None, length=n)
    return traj


_SCAN_BLOCK = 512
_RHS_CACHE = {}


def _rhs_for(phase_order, amplitude_order, frozen_H):
    key = (phase_order, amplitude_order, frozen_H)
    if key not in _RHS_CACHE:
        _RHS_CACHE[key] = _make_rhs(phase_order, amplitude_order, frozen_H)
    return _RHS_CACHE[key]


def _integrate_blocks(rhs, state0, dt, prm, n):
    """Integrate n RK4 steps in fixed-size blocks so one compilation serves every length."""
    n_blocks = -(-n // _SCAN_BLOCK)
    chunks = []
    state = state0
    for _ in range(n_blocks):
        traj = _integrate(rhs, state, dt, prm, _SCAN_BLOCK)
        chunks.append([np.asarray(x) for x in traj])
        state = tuple(x[-1] for x in traj)
    return [np.concatenate([c[i] for c in chunks])[:n] for i in range(7)]


@dataclass
class BeamPhase:
    times: np.ndarray
    gamma: np.ndarray
    p: np.ndarray
    H: np.ndarray
    C: np.ndarray
    detZ: np.ndarray
    order: int = 3

    def symmetry_defect(self):
        return float(np.max(np.abs(self.H - np.swapaxes(self.H, -1, -2))))

    def im_eigenvalues(self):
        Hs = 0.5 * (self.H + np.swapaxes(self.H, -1, -2))
        return np.linalg.eigvalsh(Hs.imag)


def _run(skel, dt, t_pad, phase_order, amplitude_order, frozen_H):
    metric = skel.metric
    T = skel.anchor.T
    rhs = _rhs_for(phase_order, amplitude_order, frozen_H)
    prm = jnp.asarray(metric.params)
    z = np.asarray(skel.anchor.z, float)
    v_end = -np.asarray(skel.anchor.zeta, float)
    state0 = (jnp.asarray(z), jnp.asarray(metric.a(z) * v_end),
              jnp.asarray(skel.H_T), jnp.eye(2, dtype=complex),
              jnp.zeros((2, 2, 2), dtype=complex), jnp.asarray(1.0 + 0j),
              jnp.zeros(2, dtype=complex))
    n_back = int(np.ceil((T + t_pad) / dt))
    n_fwd = int(np.ceil(t_pad / dt))
    back = _integrate_blocks(rhs, state0, -dt, prm, n_back)
    fwd = _integrate_blocks(rhs, state0, dt, prm, n_fwd)
    parts = []
    for i in range(7):
        s0 = np.asarray(state0[i])[None]
        b = np.asarray(back[i])[::-1]
        f = np.asarray(fwd[i])
        parts.append(np.concatenate([b, s0, f]))
    times = T + dt * np.arange(-n_back, n_fwd + 1)
    gamma, p, Y, Z, C, u0, v = parts
    detZ = np.linalg.det(Z)
    if np.min(np.abs(detZ)) < 1e-12:
        raise DegenerateZ(f"min |det Z| = {np.min(np.abs(detZ)):.3e}")
    H = Y @ np.linalg.inv(Z)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    if np.min(np.abs(u0)) < 1e-12:
        raise AmplitudeUnderflow(f"min |u0| = {np.min(np.abs(u0)):.3e}")
    phase = BeamPhase(times, gamma.real, p.real, H, C, detZ, phase_order)
    return phase, u0, v


def propagate_phase(skel, dt=2e-3, t_pad=0.25, phase_order=3, frozen_H=False):
    phase, _, _ = _run(skel, dt, t_pad, phase_order, 1, frozen_H)
    return phase


def propagate_amplitude(skel, dt=2e-3, t_pad=0.25, phase_order=3, amplitude_order=1):
    _, u0, v = _run(skel, dt, t_pad, phase_order, amplitude_order, False)
    return u0, v


@dataclass
class GaussianBeam:
    skeleton: BeamSkeleton
    phase: BeamPhase
    u0: np.ndarray
    v: np.ndarray
    rho: float
    beta_theta: float
    order_NU: int = 2
    _splines: dict = field(default=None, repr=False)

    def __post_init__(self):
        t = self.phase.times
        self._splines = {
            "gamma": CubicSpline(t, self.phase.gamma),
            "p": CubicSpline(t, self.phase.p),
            "H": CubicSpline(t, self.phase.H.reshape(len(t), 4)),
            "C": CubicSpline(t, self.phase.C.reshape(len(t), 8)),
            "u0": CubicSpline(t, self.u0),
            "v": CubicSpline(t, self.v),
        }

    @property
    def metric(self):
        return self.skeleton.metric

    @property
    def T(self):
        return self.skeleton.anchor.T

    def jets(self, t):
        t = np.asarray(t, dtype=float)
        sp = self._splines
        return (sp["gamma"](t), sp["p"](t), sp["H"](t).reshape(t.shape + (2, 2)),
                sp["C"](t).reshape(t.shape + (2, 2, 2)), sp["u0"](t), sp["v"](t))

    def theta(self, t, x):
        gamma, p, H, C, _, _ = self.jets(t)
        y = np.asarray(x, dtype=float) - gamma
        return (np.einsum("...i,...i->...", p, y)
                + 0.5 * np.einsum("...i,...ij,...j->...", y, H, y)
                + np.einsum("...ijk,...i,...j,...k->...", C, y, y, y) / 6.0)

    def grad_theta_on_ray(self, t):
        """Spatial gradient of the phase at x = gamma(t)."""
        _, p, _, _, _, _ = self.jets(t)
        return p

    def cutoff(self, t, x):
        gamma = self._splines["gamma"](np.asarray(t, dtype=float))
        d = np.linalg.norm(np.asarray(x, dtype=float) - gamma, axis=-1)
        return plateau(d, 0.5 * self.rho, self.rho)

    def evaluate(self, t, x, eps, cutoff=True):
        """chi_U exp(i theta/eps) (u0 + v.y); t and x broadcast (x has trailing axis 2)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        t, _ = np.broadcast_arrays(t, x[..., 0])
        gamma, p, H, C, u0, v = self.jets(t)
        y = x - gamma
        th = (np.einsum("...i,...i->...", p, y)
              + 0.5 * np.einsum("...i,...ij,...j->...", y, H, y)
              + np.einsum("...ijk,...i,...j,...k->...", C, y, y, y) / 6.0)
        amp = u0 + np.einsum("...i,...i->...", v, y)
        val = np.exp(1j * th / eps) * amp
        if cutoff:
            chi = plateau(np.linalg.norm(y, axis=-1), 0.5 * self.rho, self.rho)
            val = np.where(chi > 0, val * chi, 0.0)
        return val

    def diagnostics_rows(self, stride=50):
        ev = self.phase.im_eigenvalues()
        rows = []
        for k in range(0, len(self.phase.times), stride):
            rows.append({"t": self.phase.times[k], "im_eig_min": ev[k, 0], "im_eig_max": ev[k, 1],
                         "abs_u0": abs(self.u0[k]),
                         "symmetry_defect": float(np.max(np.abs(self.phase.H[k] - self.phase.H[k].T)))})
        return rows


def _im_theta_ratio(beam, t_values, radius, n_r=12, n_phi=24):
    """min over a polar sample of Im theta / d^2 at distances up to `radius`."""
    r = np.linspace(radius / n_r, radius, n_r)
    phi = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    R, P = np.meshgrid(r, phi, indexing="ij")
    offs = np.stack([R * np.cos(P), R * np.sin(P)], axis=-1).reshape(-1, 2)
    t = np.repeat(np.asarray(t_values, float), len(offs))
    gamma = beam._splines["gamma"](t)
    x = gamma + np.tile(offs, (len(t_values), 1))
    th = beam.theta(t, x)
    d2 = np.sum((x - gamma) ** 2, axis=-1)
    return float(np.min(th.imag / d2))


def build_beam(metric, anchor, eps_max=0.08, H_T=None, dt=2e-3, t_pad=0.25,
               phase_order=3, amplitude_order=1, frozen_H=False, support_margin=0.15,
               rho=None, max_rho=None):
    """Construct a Gaussian beam ending at anchor = (T, z, zeta).

    The tube radius defaults to 4 sqrt(eps_max / beta_theta), capped so that the
    cutoff at time T stays `support_margin` away from M (and below max_rho, e.g.
    to keep clear of a solver's sponge layer), and shrunk until the
    lower bound Im theta >= beta_theta d^2 holds on the tube.
    """
    skel = init_beam(metric, anchor, H_T)
    phase, u0, v = _run(skel, dt, t_pad, phase_order, amplitude_order, frozen_H)
    ev = phase.im_eigenvalues()
    if np.min(ev) <= 0:
        raise DegenerateZ("imaginary part of H lost positivity")
    active = phase.times >= skel.entry_time - 0.5
    beta_theta = 0.5 * float(np.min(ev[active, 0]))
    dist = np.linalg.norm(np.asarray(anchor.z) - np.asarray(metric.center)) - metric.radius
    if rho is None:
        rho = min(4.0 * np.sqrt(eps_max / beta_theta), dist - support_margin)
        if max_rho is not None:
            rho = min(rho, max_rho)
    beam = GaussianBeam(skel, phase, u0, v, float(rho), beta_theta)
    sample_t = np.linspace(max(skel.entry_time - 0.5, phase.times[0]), anchor.T, 24)
    for _ in range(20):
        ratio = _im_theta_ratio(beam, sample_t, beam.rho)
        if ratio >= beta_theta * 0.5:
            break
        beam.rho *= 0.85
    beam.beta_theta = min(beta_theta, ratio)
    return beam


def beam_to_initial_data(beam, eps, grid_x, grid_y, dt):
    """Two leapfrog levels (w at T and at T + dt) on a grid, plus the support set."""
    metric = beam.metric
    z = np.asarray(beam.skeleton.anchor.z, float)
    c = np.asarray(metric.center)
    if np.linalg.norm(z - c) - beam.rho <= metric.radius:
        raise SupportTouchesM(f"cutoff radius {beam.rho:.3f} reaches M")
    X, Y = np.meshgrid(grid_x, grid_y, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    w0 = beam.evaluate(beam.T, pts, eps)
    w1 = beam.evaluate(beam.T + dt, pts, eps)
    support = (np.abs(w0) > 0) | (np.abs(w1) > 0)
    return w0, w1, support


def beam_residual(beam, eps, n_t=24, n_r=10, n_phi=16, t_range=None, radius=None,
                  relative=True, step_fraction=0.05):
    """Sup over a tube sample of |(d_t^2 - Delta_g) U_eps| by 4th-order differences.

    With relative=True the residual is divided by sup |d_t^2 U_eps|, which removes
    the eps^-2 scale of the operator applied to a frequency-1/eps wave.
    """
    metric = beam.metric
    skel = beam.skeleton
    if t_range is None:
        t_range = (skel.entry_time - 0.2, skel.exit_time + 0.2)
    if radius is None:
        radius = 0.5 * beam.rho
    t = np.linspace(*t_range, n_t)
    r = np.linspace(0.0, radius, n_r)
    phi = np.linspace(0, 2 * np.pi, n_phi, endpoint=False)
    R, P = np.meshgrid(r, phi, indexing="ij")
    offs = np.stack([R * np.cos(P), R * np.sin(P)], axis=-1).reshape(-1, 2)
    tt = np.repeat(t, len(offs))
    xx = beam._splines["gamma"](tt) + np.tile(offs, (n_t, 1))
    h = step_fraction * eps
    coef = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
    shifts = np.array([-2, -1, 0, 1, 2]) * h

    def U(ts, xs):
        return beam.evaluate(ts, xs, eps, cutoff=False)

    utt = sum(c * U(tt + s, xx) for c, s in zip(coef, shifts))
    lap = 0
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = 1.0
        lap = lap + sum(c * U(tt, xx + s * e) for c, s in zip(coef, shifts))
    res = utt - lap / metric.a(xx)
    out = float(np.max(np.abs(res)))
    if relative:
        out /= float(np.max(np.abs(utt)))
    return out


def write_diagnostics_csv(path, beam, beam_id=0, stride=50):
    rows = beam.diagnostics_rows(stride)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["beam_id"] + list(rows[0].keys()))
        wr.writeheader()
        for row in rows:
            wr.writerow({"beam_id": beam_id, **{k: f"{val:.10g}" for k, val in row.items()}})
