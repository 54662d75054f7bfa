"""Finite-difference wave solver on a square box with a sponge layer.

Scheme: 5-point Laplacian divided by the conformal factor (Delta_g = a^-1 Delta
in two dimensions), damped leapfrog

    (1 + s) u^{n+1} = 2 u^n - (1 - s) u^{n-1} + dt^2 (a^-1 Delta_h u^n + f^n),
    s = sigma dt / 2,

with the sponge coefficient sigma growing quadratically in the outer layer.
Backward solves use the adjoint recursion

    (1 + s) w^{n-1} = 2 w^n - (1 - s) w^{n+1} + dt^2 a^-1 Delta_h w^n,

which gives the exact discrete identity

    <(1+s) u^{N+1}, w^N> - <(1-s) u^N, w^{N+1}> = dt^2 sum_n <f^n, w^n>

in the inner product <u, v> = sum a u v h^2.  Boundary sources are deposited
with bilinear weights and traces read with the same weights, so the right-hand
side equals dt^2 sum_n sum_l F^n_l w^n(x_l) dl.
"""
from dataclasses import dataclass, field
import csv
import struct

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _wavekernels as wk
from .cutoffs import smoothstep
from .noise import BoundaryLattice


class Unstable(FloatingPointError):
    """The field became non-finite."""


class SupportLeak(ValueError):
    """The snapshot window reaches the boundary lattice."""


SNAPSHOT_MAGIC = b"NSWAVE01"


@dataclass
class Grid:
    metric: object
    h: float
    dt: float
    half_width: float
    sponge_width: float
    sponge_strength: float = 60.0
    n_l: int = 0
    x: np.ndarray = field(init=False, repr=False)
    inv_a: np.ndarray = field(init=False, repr=False)
    a: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(round(2 * self.half_width / self.h))
        self.h = 2 * self.half_width / n
        self.x = -self.half_width + self.h * np.arange(n + 1)
        X, Y = self.mesh()
        pts = np.stack([X, Y], axis=-1)
        self.a = self.metric.conformal_factor(pts)
        self.inv_a = 1.0 / self.a
        c = np.asarray(self.metric.center)
        depth = np.maximum(np.abs(X - c[0]), np.abs(Y - c[1])) - (self.half_width - self.sponge_width)
        self.sigma = self.sponge_strength * np.clip(depth / self.sponge_width, 0, 1) ** 2
        cfl = 0.5 * self.h / np.sqrt(self.a.max())
        if self.dt > cfl * (1 + 1e-12):
            raise ValueError(f"time step {self.dt} violates the CFL bound {cfl:.4g}")
        if self.n_l <= 0:
            self.n_l = int(round(self.metric.circumference / self.h))
        self._setup_boundary()

    @classmethod
    def for_metric(cls, metric, h, T, cfl=0.5, box_factor=3.0, sponge_factor=0.5, multiple=1):
        """Box half-width box_factor*R, sponge in the outer sponge_factor*R, dt = T/n_t <= cfl*h/sqrt(max a).

        n_t is rounded up to a multiple of `multiple` so coarser lattices can subsample it.
        """
        a_max = 1.0 + max(metric.amplitude, 0.0)  # upper bound of the conformal factor
        n_t = int(np.ceil(T / (cfl * h / np.sqrt(a_max))))
        n_t = multiple * int(np.ceil(n_t / multiple))
        return cls(metric, h, T / n_t, box_factor * metric.radius, sponge_factor * metric.radius)

    @property
    def n(self):
        return len(self.x)

    def mesh(self):
        c = np.asarray(self.metric.center)
        return np.meshgrid(self.x + c[0], self.x + c[1], indexing="ij")

    def points(self):
        X, Y = self.mesh()
        return np.stack([X, Y], axis=-1)

    def lattice(self, T):
        n_t = int(round(T / self.dt))
        if abs(n_t * self.dt - T) > 1e-9 * T:
            raise ValueError("window length must be a multiple of dt")
        return BoundaryLattice(T, n_t, self.metric.circumference, self.n_l)

    def _setup_boundary(self):
        ell = self.metric.circumference / self.n_l * np.arange(self.n_l)
        self.boundary_arclength = ell
        self.boundary_points = self.metric.boundary_point(ell)
        self.dl = self.metric.circumference / self.n_l
        self.b_idx, self.b_wts = self.bilinear(self.boundary_points)

    def bilinear(self, pts):
        """Flat node indices and weights (m, 4) of bilinear interpolation at pts."""
        c = np.asarray(self.metric.center)
        fx = (pts[:, 0] - c[0] - self.x[0]) / self.h
        fy = (pts[:, 1] - c[1] - self.x[0]) / self.h
        i = np.floor(fx).astype(np.int64)
        j = np.floor(fy).astype(np.int64)
        ax = fx - i
        ay = fy - j
        n = self.n
        idx = np.stack([i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1], axis=-1)
        wts = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=-1)
        return idx, wts

    def inner(self, u, v):
        """<u, v> = sum a u v h^2 (bilinear)."""
        return np.sum(self.a * u * v) * self.h ** 2


def chi_plus(t):
    """Smooth switch-on of the source: 0 for t <= 0, 1 for t >= 1."""
    return smoothstep(np.asarray(t, dtype=float))


class Stepper:
    """Owns the damping arrays and scratch buffers for one grid."""

    def __init__(self, grid, sponge=True):
        self.grid = grid
        s = 0.5 * grid.sigma * grid.dt if sponge else np.zeros_like(grid.sigma)
        self.d_plus = 1.0 + s
        self.d_minus = 1.0 - s
        self.dt2 = grid.dt ** 2
        self.inv_h2 = 1.0 / grid.h ** 2
        # weight turning a boundary value into its increment of u^{n+1}
        self.src_coef = self.dt2 * grid.inv_a / self.d_plus * grid.dl / grid.h ** 2

    def step(self, u, u_prev, out, values=None):
        """One update into `out`; `values` are boundary source values F^n (or None)."""
        wk.leapfrog(u, u_prev, out, self.grid.inv_a, self.d_plus, self.d_minus, self.dt2, self.inv_h2)
        if values is not None:
            wk.deposit(out, self.grid.b_idx, self.grid.b_wts,
                       np.ascontiguousarray(values, dtype=out.dtype), self.src_coef)
        return out

    def trace(self, u):
        out = np.zeros(len(self.grid.b_idx), dtype=u.dtype)
        wk.interpolate(u, self.grid.b_idx, self.grid.b_wts, out)
        return out

    def source(self, values, dtype=float):
        """Grid forcing f with <f, w> = sum_l F_l w(x_l) dl."""
        g = self.grid
        f = np.zeros((g.n, g.n), dtype=dtype)
        coef = g.inv_a * g.dl / g.h ** 2
        wk.deposit(f, g.b_idx, g.b_wts, np.ascontiguousarray(values, dtype=dtype), coef)
        return f


def _check(u, n):
    if not np.isfinite(u).all():
        raise Unstable(f"non-finite field at step {n}")


def run(stepper, n_steps, u0=None, u1=None, forcing=None, snapshot_steps=(), trace=True,
        check_every=200, dtype=float):
    """March from levels (u^0, u^1) up to u^{n_steps+1}.

    forcing(n) returns boundary values F^n (length n_l) or None; F^n enters the
    update that produces u^{n+1}.  Returns (trace, snapshots) with trace[n] the
    boundary trace of u^n for n = 0..n_steps and snapshots {n: (u^n, u^{n+1})}.
    """
    g = stepper.grid
    shape = (g.n, g.n)
    u_prev = np.zeros(shape, dtype) if u0 is None else np.array(u0, dtype=dtype)
    if u1 is None:
        u = np.zeros(shape, dtype)
        f0 = forcing(0) if forcing is not None else None
        if f0 is not None:
            wk.deposit(u, g.b_idx, g.b_wts, np.ascontiguousarray(f0, dtype=dtype), stepper.src_coef)
    else:
        u = np.array(u1, dtype=dtype)
    tr = np.zeros((n_steps + 1, g.n_l), dtype=dtype) if trace else None
    want = set(snapshot_steps)
    snaps = {}
    if 0 in want:
        snaps[0] = (u_prev.copy(), u.copy())
    if trace:
        tr[0] = stepper.trace(u_prev)
    for n in range(1, n_steps + 1):
        if trace:
            tr[n] = stepper.trace(u)
        f = forcing(n) if forcing is not None else None
        new = stepper.step(u, u_prev, u_prev, f)
        u_prev, u = u, new
        if n in want:
            snaps[n] = (u_prev.copy(), u.copy())
        if n % check_every == 0:
            _check(u, n)
    _check(u, n_steps)
    return tr, snaps


# -- high level solves ---------------------------------------------------------

@dataclass
class ForwardResult:
    trace: np.ndarray          # (n_windows * n_t + 1, n_l): u^n on the boundary lattice
    snapshots: dict            # window j -> (u^{jN}, u^{jN+1})
    lattice: BoundaryLattice
    n_windows: int


def noise_forcing(noise, with_chi_plus=True):
    """forcing(n) for the solver: chi_+(t_n) W at lattice time t_n = n dt."""
    lat = noise.lattice
    cache = {}

    def forcing(n):
        j = n // lat.n_t + 1
        if j > noise.n_windows:
            return None
        if j not in cache:
            cache.clear()
            cache[j] = noise.window(j)
        vals = cache[j][n % lat.n_t]
        if with_chi_plus:
            vals = vals * chi_plus(n * lat.dt)
        return vals
    return forcing


def solve_forward(noise, grid, sponge=True, forcing=None):
    """Zero initial data, source chi_+ W deposited on the boundary; windows of length T."""
    lat = noise.lattice
    if abs(lat.dt - grid.dt) > 1e-12 or lat.n_l != grid.n_l:
        raise ValueError("noise lattice does not match the solver grid")
    N = lat.n_t
    steps = [j * N for j in range(1, noise.n_windows + 1)]
    st = Stepper(grid, sponge)
    tr, snaps = run(st, noise.n_windows * N, forcing=forcing or noise_forcing(noise), snapshot_steps=steps)
    return ForwardResult(tr, {j: snaps[j * N] for j in range(1, noise.n_windows + 1)}, lat, noise.n_windows)


@dataclass
class BackwardBeam:
    """Backward solution w^n, n = N+1 down to n_min, with its boundary trace."""
    trace: np.ndarray     # trace[k] = w^{N - k}(x_l), k = 0..N - n_min
    w_T: np.ndarray       # w^N
    w_T1: np.ndarray      # w^{N+1}
    N: int
    dt: float

    def at(self, n):
        """Boundary values of w^n (n <= N)."""
        return self.trace[self.N - n]

    def window(self, k, n_t):
        """(n_t, n_l) trace of w^n for n in [N - k n_t ... ] arranged as window 1 - k.

        k = 0 gives beam times 0..T - dt, k = 1 gives -T..-dt, and so on.
        """
        n = np.arange(n_t) - k * n_t
        idx = self.N - n
        if idx.max() >= len(self.trace):
            return np.zeros((n_t, self.trace.shape[1]), dtype=self.trace.dtype)
        return self.trace[idx]


def solve_backward_beam(beam, eps, grid, T=None, n_windows=1, sponge=True):
    """Solve the wave equation backward from the beam's Cauchy data at T.

    The run covers beam times (-(n_windows-1)T, T]; the trace is complex.
    """
    from .beams import beam_to_initial_data
    T = beam.T if T is None else T
    N = int(round(T / grid.dt))
    c = np.asarray(grid.metric.center)
    z = np.asarray(beam.skeleton.anchor.z, float)
    inner_edge = grid.half_width - grid.sponge_width
    if np.max(np.abs(z - c)) + beam.rho > inner_edge:
        raise ValueError("beam cutoff reaches the sponge layer")
    X, Y = grid.mesh()
    w_T, w_T1, _ = beam_to_initial_data(beam, eps, grid.x + c[0], grid.x + c[1], grid.dt)
    st = Stepper(grid, sponge)
    n_steps = n_windows * N
    # v^k = w^{N+1-k}
    tr, _ = run(st, n_steps + 1, u0=w_T1, u1=w_T, dtype=complex)
    # tr[k] = v^k = w^{N+1-k}; drop k = 0 so trace[k] = w^{N-k}
    return BackwardBeam(tr[1:], w_T, w_T1, N, grid.dt)


def snapshot_pairing(grid, u_pair, w_pair, sponge=True):
    """(<(1+s) u^{N+1}, w^N> - <(1-s) u^N, w^{N+1}>) / dt, the discrete (u_t, w) - (u, w_t)."""
    s = 0.5 * grid.sigma * grid.dt if sponge else 0.0
    uN, uN1 = u_pair
    wN, wN1 = w_pair
    return (grid.inner((1 + s) * uN1, wN) - grid.inner((1 - s) * uN, wN1)) / grid.dt


def lattice_pairing(lattice, values, phi):
    """sum values * phi dt dl over a window array."""
    return np.sum(values * phi) * lattice.dt * lattice.dl


# -- measurement and exterior problem -------------------------------------------

@dataclass
class Measurement:
    scattered: np.ndarray       # trace of u - u_in
    incoming: ForwardResult     # background solve (known to the observer)
    full: ForwardResult         # true-metric solve (used only by oracles)


def measurement(noise, grid, background_grid):
    """Two forward solves with the same noise; the scattered trace is the data L W."""
    full = solve_forward(noise, grid)
    inc = solve_forward(noise, background_grid)
    return Measurement(full.trace - inc.trace, inc, full)


class ExteriorDirichlet:
    """Stepper for the exterior of M with Dirichlet data imposed through mirror ghosts.

    Nodes inside M within 2h of the boundary are ghosts; each step sets
    u_ghost = 2 h(x_b) - u(x_image) with x_image the reflection through the
    boundary along the radius.  Deeper interior nodes stay zero.
    """

    def __init__(self, grid):
        self.grid = grid
        self.stepper = Stepper(grid)
        c = np.asarray(grid.metric.center)
        pts = grid.points()
        r = np.linalg.norm(pts - c, axis=-1)
        R = grid.metric.radius
        inside = r < R
        # every inside node within 2h of the boundary is a ghost, so the bilinear
        # cell around each mirror image only touches exterior or ghost nodes
        ghost = inside & (r > R - 2.0 * grid.h)
        self.inside = inside
        self.ghost_flat = np.flatnonzero(ghost.ravel())
        gp = pts.reshape(-1, 2)[self.ghost_flat]
        gr = r.ravel()[self.ghost_flat]
        dirs = (gp - c) / gr[:, None]
        self.image = c + (2 * R - gr)[:, None] * dirs
        self.img_idx, self.img_wts = grid.bilinear(self.image)
        # ghost values solve (I + W_gg) u_g = 2 h - W_ge u_e; factor once
        ng = len(self.ghost_flat)
        slot = -np.ones(grid.n * grid.n, dtype=np.int64)
        slot[self.ghost_flat] = np.arange(ng)
        corner_slot = slot[self.img_idx]
        is_ghost = corner_slot >= 0
        if np.any(inside.ravel()[self.img_idx] & ~is_ghost):
            raise RuntimeError("mirror image cell touches a non-ghost interior node")
        rows = np.repeat(np.arange(ng), 4).reshape(ng, 4)[is_ghost]
        mat = sp.csc_matrix((self.img_wts[is_ghost], (rows, corner_slot[is_ghost])), shape=(ng, ng))
        self.lu = spla.splu((sp.identity(ng, format="csc") + mat).tocsc())
        self.ext_wts = np.where(is_ghost, 0.0, self.img_wts)
        ell = grid.metric.arclength(c + R * dirs)
        # periodic linear interpolation weights on the boundary lattice
        pos = ell / grid.dl
        i0 = np.floor(pos).astype(int) % grid.n_l
        self.b_i0 = i0
        self.b_i1 = (i0 + 1) % grid.n_l
        self.b_w = pos - np.floor(pos)

    def boundary_values(self, h_row):
        return (1 - self.b_w) * h_row[self.b_i0] + self.b_w * h_row[self.b_i1]

    def impose(self, u, h_row):
        flat = u.ravel()
        flat[self.inside.ravel()] = 0.0
        hb = self.boundary_values(h_row)
        ext = np.sum(flat[self.img_idx] * self.ext_wts, axis=-1)
        flat[self.ghost_flat] = self.lu.solve(2 * hb - ext)

    def run(self, h, n_steps, snapshot_steps=(), band_steps=0, cut_at=()):
        """March with boundary data h[n] (n = 0..n_steps+1); zero initial data.

        For each step m in cut_at a side branch is run over the last band_steps
        steps with the data multiplied by a smooth cutoff chi_T falling to zero at
        m, and the branch's snapshot (v^m, v^{m+1}) is returned in place of the
        uncut one.  Returns {m: (v^m, v^{m+1})}.
        """
        g = self.grid
        st = self.stepper
        u_prev = np.zeros((g.n, g.n))
        u = np.zeros((g.n, g.n))
        self.impose(u_prev, h[0])
        self.impose(u, h[1])
        want = set(snapshot_steps)
        branch_start = {m - band_steps: m for m in cut_at}
        snaps = {}
        for n in range(1, n_steps + 1):
            if n in branch_start:
                m = branch_start[n]
                snaps[m] = self._branch(u_prev.copy(), u.copy(), h, n, m)
            new = st.step(u, u_prev, u_prev)
            self.impose(new, h[n + 1])
            u_prev, u = u, new
            if n in want and n not in snaps:
                snaps[n] = (u_prev.copy(), u.copy())
            if n % 200 == 0:
                _check(u, n)
        return snaps

    def _branch(self, u_prev, u, h, n0, m):
        st = self.stepper
        band = m - n0
        for n in range(n0, m + 1):
            new = st.step(u, u_prev, u_prev)
            k = n + 1
            cut = 1.0 - smoothstep((k - n0) / band) if band > 0 else 0.0
            self.impose(new, h[k] * cut)
            u_prev, u = u, new
        return (u_prev.copy(), u.copy())


def cutoff_band_steps(grid, T, omega_distance, fraction=0.05):
    """chi_T band: min(fraction of the window, half the distance from Omega to the boundary)."""
    band = min(fraction * T, 0.5 * omega_distance)
    return max(1, int(band / grid.dt))


def exterior_solve(grid, h, windows, n_t, band_steps):
    """Snapshots at steps j*n_t of the exterior solution with data chi_T h."""
    ext = ExteriorDirichlet(grid)
    steps = [j * n_t for j in windows]
    n_total = max(steps)
    hh = np.zeros((n_total + 2, h.shape[1]))
    m = min(len(h), n_total + 2)
    hh[:m] = h[:m]
    return ext.run(hh, n_total, cut_at=steps, band_steps=band_steps)


# -- file formats -----------------------------------------------------------------

def write_snapshot(path, grid, field_values, t):
    """Row-major float64 field with a 32-byte header: magic(8) nx(4) ny(4) h(8) t(8)."""
    arr = np.ascontiguousarray(field_values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC + struct.pack("<iidd", arr.shape[0], arr.shape[1], grid.h, t))
        fh.write(arr.tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        head = fh.read(32)
        if head[:8] != SNAPSHOT_MAGIC:
            raise ValueError("not a snapshot file")
        nx, ny, h, t = struct.unpack("<iidd", head[8:])
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(nx, ny)
    return data, h, t


def write_trace_csv(path, trace, dt, arclengths, t0=0.0, stride=1):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "arclength", "value"])
        for n in range(0, trace.shape[0], stride):
            t = t0 + n * dt
            for l, val in zip(arclengths, trace[n]):
                wr.writerow([f"{t:.10g}", f"{l:.10g}", f"{np.real(val):.12g}"])
