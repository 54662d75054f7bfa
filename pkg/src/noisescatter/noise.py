"""Discrete white noise on the space-time boundary lattice.

Each window j (1-based) of length T is an (n_t, n_l) array of independent
Gaussians with variance 1/(dt dl), so that sum W phi dt dl reproduces the
white-noise covariance E (W, phi)(W, psi) = (phi, psi)_{L^2} in the limit.

Values come from numpy's Philox counter-based generator keyed by (seed, window).
Block b of the counter holds four 64-bit words, turned into four normals by
Box-Muller, so cell c of a window is a function of (seed, window, c) alone.
"""
from dataclasses import dataclass
import csv

import numpy as np


class CovarianceFail(AssertionError):
    """Empirical pairing covariance disagrees with the exact inner product."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows or []


@dataclass(frozen=True)
class BoundaryLattice:
    T: float
    n_t: int
    circumference: float
    n_l: int

    @property
    def dt(self):
        return self.T / self.n_t

    @property
    def dl(self):
        return self.circumference / self.n_l

    @property
    def cells(self):
        return self.n_t * self.n_l

    def times(self, j=1):
        """Lattice times of window j: (j-1)T + i dt, i = 0..n_t-1."""
        return (j - 1) * self.T + self.dt * np.arange(self.n_t)

    def arclengths(self):
        return self.dl * np.arange(self.n_l)

    def mesh(self, j=1):
        return np.meshgrid(self.times(j), self.arclengths(), indexing="ij")


def _normals_from_words(words):
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u = u.reshape(-1, 2)
    rad = np.sqrt(-2.0 * np.log(u[:, 0]))
    ang = 2.0 * np.pi * u[:, 1]
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1).reshape(-1)


def standard_normals(seed, window, n, start=0):
    """n standard normals for cells start..start+n-1 of (seed, window)."""
    b0 = start // 4
    b1 = -(-(start + n) // 4)
    key = np.array([np.uint64(seed) & np.uint64(2 ** 64 - 1), np.uint64(window)], dtype=np.uint64)
    gen = np.random.Philox(key=key, counter=np.array([b0, 0, 0, 0], dtype=np.uint64))
    z = _normals_from_words(gen.random_raw(4 * (b1 - b0)))
    off = start - 4 * b0
    return z[off:off + n]


@dataclass(frozen=True)
class NoiseRealization:
    seed: int
    lattice: BoundaryLattice
    n_windows: int
    bias: float = 0.0  # fault-injection hook: shifts every cell's mean (in standard units)

    @property
    def scale(self):
        return 1.0 / np.sqrt(self.lattice.dt * self.lattice.dl)

    def window(self, j):
        if not 1 <= j <= self.n_windows:
            raise IndexError(f"window {j} outside 1..{self.n_windows}")
        lat = self.lattice
        z = standard_normals(self.seed, j, lat.cells)
        return ((z + self.bias) * self.scale).reshape(lat.n_t, lat.n_l)

    def rows(self, j, i0, i1):
        """Time rows i0..i1-1 of window j; identical to window(j)[i0:i1]."""
        if not 1 <= j <= self.n_windows:
            raise IndexError(f"window {j} outside 1..{self.n_windows}")
        lat = self.lattice
        z = standard_normals(self.seed, j, (i1 - i0) * lat.n_l, start=i0 * lat.n_l)
        return ((z + self.bias) * self.scale).reshape(i1 - i0, lat.n_l)

    def cell(self, j, i, l):
        lat = self.lattice
        z = standard_normals(self.seed, j, 1, start=i * lat.n_l + l)[0]
        return (z + self.bias) * self.scale

    def windows(self, j0=1, j1=None):
        j1 = self.n_windows if j1 is None else j1
        for j in range(j0, j1 + 1):
            yield j, self.window(j)


def sample(seed, lattice, n_windows, bias=0.0):
    return NoiseRealization(int(seed), lattice, int(n_windows), float(bias))


def pair(noise, phi, windows=None):
    """Discrete pairing (W, phi) = sum_ij W_ij phi(t_i, l_j) dt dl.

    phi is a callable phi(t, l) on broadcast arrays, or a dict {window: array}.
    """
    lat = noise.lattice
    w = lat.dt * lat.dl
    if isinstance(phi, dict):
        return sum(np.sum(noise.window(j) * arr) * w for j, arr in phi.items())
    total = 0.0
    for j in (windows or range(1, noise.n_windows + 1)):
        tt, ll = lat.mesh(j)
        vals = phi(tt, ll)
        if np.any(vals != 0):
            total = total + np.sum(noise.window(j) * vals) * w
    return total


def l2_inner(lattice, phi, psi, windows, refine=4):
    """(phi, psi)_{L^2} by a refined Riemann sum (bilinear, no conjugation)."""
    dt = lattice.dt / refine
    dl = lattice.dl / refine
    total = 0.0
    for j in windows:
        t = (j - 1) * lattice.T + dt * np.arange(lattice.n_t * refine)
        l = dl * np.arange(lattice.n_l * refine)
        tt, ll = np.meshgrid(t, l, indexing="ij")
        total = total + np.sum(phi(tt, ll) * psi(tt, ll)) * dt * dl
    return total


def _bump(t0, l0, width, circ):
    def f(t, l):
        dl = (l - l0 + 0.5 * circ) % circ - 0.5 * circ
        r2 = ((t - t0) ** 2 + dl ** 2) / width ** 2
        return np.where(r2 < 1, np.exp(-1.0 / np.maximum(1e-300, 1 - r2)), 0.0) * np.e
    return f


def pairing_library(lattice):
    """Five (name, phi, psi) pairs: identical, disjoint, half-overlapping, orthogonal, cross-window."""
    T, C = lattice.T, lattice.circumference
    w = min(0.3 * T, 0.15 * C)
    b = _bump(0.5 * T, 0.25 * C, w, C)
    odd = lambda t, l: b(t, l) * np.sin(np.pi * (t - 0.5 * T) / w)
    return [
        ("identical", b, b),
        ("disjoint", b, _bump(0.5 * T, 0.75 * C, w, C)),
        ("half_overlap", b, _bump(0.5 * T + w, 0.25 * C, w, C)),
        ("orthogonal", b, odd),
        ("cross_window", b, _bump(1.5 * T, 0.25 * C, w, C)),
    ]


def covariance_suite(lattice, n_seeds=10_000, seed0=0, bias=0.0, z_max=5.0):
    """z-scores of empirical E[(W,phi)(W,psi)] against (phi, psi)_{L^2}.

    Returns a list of dict rows; raises CovarianceFail when any |z| > z_max.
    """
    lib = pairing_library(lattice)
    n_win = 2
    cellw = lattice.dt * lattice.dl
    arrays = []
    for _, phi, psi in lib:
        a = np.concatenate([phi(*lattice.mesh(j)).ravel() for j in (1, 2)])
        b = np.concatenate([psi(*lattice.mesh(j)).ravel() for j in (1, 2)])
        arrays.append((a * cellw, b * cellw))
    prods = np.zeros((len(lib), n_seeds))
    firsts = np.zeros((len(lib), n_seeds))
    for k in range(n_seeds):
        noise = sample(seed0 + k, lattice, n_win, bias)
        W = np.concatenate([noise.window(j).ravel() for j in (1, 2)])
        for m, (a, b) in enumerate(arrays):
            pa = W @ a
            prods[m, k] = pa * (W @ b)
            firsts[m, k] = pa
    rows = []
    for m, (name, phi, psi) in enumerate(lib):
        exact = l2_inner(lattice, phi, psi, (1, 2))
        lattice_exact = float(arrays[m][0] @ arrays[m][1]) / cellw
        mean = prods[m].mean()
        se = prods[m].std(ddof=1) / np.sqrt(n_seeds)
        z = (mean - exact) / se
        zmean = firsts[m].mean() / (firsts[m].std(ddof=1) / np.sqrt(n_seeds))
        rows.append({"pair": name, "exact": exact, "lattice_sum": lattice_exact,
                     "empirical": mean, "std_error": se, "z": z, "z_mean": zmean})
    bad = [r["pair"] for r in rows if abs(r["z"]) > z_max or abs(r["z_mean"]) > z_max]
    if bad:
        raise CovarianceFail(f"covariance check failed for {bad}", rows)
    return rows


def dump_window_csv(path, noise, j):
    lat = noise.lattice
    vals = noise.window(j)
    t = lat.times(j)
    l = lat.arclengths()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "arclength", "value"])
        for i in range(lat.n_t):
            for k in range(lat.n_l):
                wr.writerow([f"{t[i]:.10g}", f"{l[k]:.10g}", f"{vals[i, k]:.17g}"])
