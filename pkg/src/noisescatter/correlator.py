"""Correlation of test processes X_eps^j, Y_eps^j and the deterministic pairing beta_eps.

    X^j = eps^{-1/2} (W, psi^j),   Y^j = eps^{-1/2} (W, chi_+ w^j),
    beta_eps = eps^{-1} (psi, w)_{L^2((0,T) x boundary)}   (bilinear, n = 2)

so that E[X^j Y^j] = beta_eps.  w^j is the beam trace translated by (j-1)T.
"""
from dataclasses import dataclass, field
import csv

import numpy as np

from .wavesolver import chi_plus, snapshot_pairing, SupportLeak


class LemmaFail(AssertionError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# -- deterministic pairing ---------------------------------------------------------

def _patch(metric, center_t, center_x, half_t, half_l, step):
    t = center_t + np.arange(-half_t, half_t + 0.5 * step, step)
    l0 = metric.arclength(np.asarray(center_x))
    ls = l0 + np.arange(-half_l, half_l + 0.5 * step, step)
    return t, ls, metric.boundary_point(ls)


def beta_quadrature(beam, tf, eps, step=None):
    """eps^{-1} (psi, U_eps) on the boundary, with the formal beam standing in for w.

    The trace of the solution differs from the formal beam by O(eps^2) on the
    boundary, below the O(eps) correction being resolved.  The sum runs over
    the support of psi with step ~ eps/4, which resolves both oscillations.
    """
    metric = beam.metric
    if step is None:
        step = min(0.01, eps / 4.0)
    half_l = tf.r_x * 1.05
    t, ls, pts = _patch(metric, tf.s, tf.y, tf.r_t, half_l, step)
    tt = t[:, None]
    psi = tf.evaluate(tt, pts[None, :, :], eps)
    mask = np.abs(psi) > 0
    rows = np.flatnonzero(mask.any(axis=1))
    total = 0.0 + 0.0j
    for chunk in np.array_split(rows, max(1, len(rows) // 64)):
        if chunk.size == 0:
            continue
        w = beam.evaluate(t[chunk, None], pts[None, :, :], eps) * chi_plus(t[chunk, None])
        total += np.sum(psi[chunk] * w)
    return total * step * step / eps


def beta_quadrature_lattice(metric, lattice, tf, w_window, eps):
    """eps^{-1} sum psi chi_+ w dt dl on window 1 of a boundary lattice (solver trace path)."""
    tt, ll = lattice.mesh(1)
    psi = tf.evaluate(tt, metric.boundary_point(ll), eps)
    return np.sum(psi * chi_plus(tt) * w_window) * lattice.dt * lattice.dl / eps


def boundary_mass_formal(beam, eps, half_t=1.0, half_l=1.0, step=None):
    """||chi_U U_eps||^2 on (0,T) x boundary, summed over neighbourhoods of the crossings."""
    metric = beam.metric
    skel = beam.skeleton
    if step is None:
        step = min(0.01, eps / 4.0)
    total = 0.0
    for tc in (skel.entry_time, skel.exit_time):
        xc = beam._splines["gamma"](tc)
        t, ls, pts = _patch(metric, tc, xc, half_t, half_l, step)
        t = t[(t > 0) & (t < beam.T)]
        for chunk in np.array_split(t, max(1, len(t) // 64)):
            w = beam.evaluate(chunk[:, None], pts[None, :, :], eps)
            total += float(np.sum(np.abs(w) ** 2))
    return total * step * step


# -- trace windows --------------------------------------------------------------------

@dataclass
class TraceWindows:
    """Beam trace on a boundary lattice, window k = 0 covering beam times [0, T),
    k = 1 covering [-T, 0), ...; rows holds the time rows that carry signal."""
    lattice: object
    windows: list
    rows: list = field(default=None)

    def __post_init__(self):
        if self.rows is None:
            peak = max(np.abs(w).max() for w in self.windows)
            self.rows = [np.flatnonzero(np.abs(w).max(axis=1) > 1e-12 * peak) for w in self.windows]

    @property
    def J(self):
        return len(self.windows)

    def tail_norms(self):
        """||w||^2 over each window (boundary L^2)."""
        lat = self.lattice
        return np.array([np.sum(np.abs(w) ** 2) * lat.dt * lat.dl for w in self.windows])


def trace_windows_from_solver(backward, lattice, J, time_stride=1, space_stride=1):
    """Windows of a backward solve, optionally subsampled onto a coarser lattice."""
    n_fine = lattice.n_t * time_stride
    wins = []
    for k in range(J):
        w = backward.window(k, n_fine)
        wins.append(np.ascontiguousarray(w[::time_stride, ::space_stride]))
    return TraceWindows(lattice, wins)


def trace_windows_from_beam(beam, lattice, eps, J=1):
    """Formal beam sampled on the lattice for beam times [0, T); earlier windows are zero."""
    tt, ll = lattice.mesh(1)
    pts = beam.metric.boundary_point(ll)
    w0 = np.zeros(tt.shape, dtype=complex)
    for chunk in np.array_split(np.arange(tt.shape[0]), max(1, tt.shape[0] // 64)):
        w0[chunk] = beam.evaluate(tt[chunk], pts[chunk], eps)
    return TraceWindows(lattice, [w0] + [np.zeros_like(w0) for _ in range(J - 1)])


# -- samples --------------------------------------------------------------------------

def psi_window(metric, lattice, tf, eps):
    """psi on the window-1 lattice (rows outside the support are zero)."""
    tt, ll = lattice.mesh(1)
    pts = metric.boundary_point(ll)
    return tf.evaluate(tt, pts, eps)


def x_sample(noise, psi_win, eps, j):
    """eps^{-1/2} (W, psi^j): only window j enters."""
    lat = noise.lattice
    return np.sum(noise.window(j) * psi_win) * lat.dt * lat.dl / np.sqrt(eps)


def y_sample_direct(noise, traces, eps, j, J_tail=None):
    """eps^{-1/2} (W, chi_+ w^j) over windows j, j-1, ..., j-J_tail+1."""
    lat = noise.lattice
    J = traces.J if J_tail is None else min(J_tail, traces.J)
    total = 0.0 + 0.0j
    for k in range(J):
        m = j - k
        if m < 1:
            break
        w = traces.windows[k]
        if m == 1:
            w = w * chi_plus(lat.times(1))[:, None]
        total += np.sum(noise.window(m) * w)
    return total * lat.dt * lat.dl / np.sqrt(eps)


def y_sample_data(grid, incoming_snapshot, exterior_snapshot, w_pair, eps):
    """eps^{-1/2} [(d_t U(T), w(T)) - (U(T), d_t w(T))] with U = U_in + K_ex(chi_T L W) on Omega."""
    wN, wN1 = w_pair
    support = (np.abs(wN) > 0) | (np.abs(wN1) > 0)
    c = np.asarray(grid.metric.center)
    r = np.linalg.norm(grid.points() - c, axis=-1)
    if np.any(support & (r < grid.metric.radius + 2 * grid.h)):
        raise SupportLeak("snapshot window touches the boundary lattice cells")
    uN = incoming_snapshot[0] + exterior_snapshot[0]
    uN1 = incoming_snapshot[1] + exterior_snapshot[1]
    return snapshot_pairing(grid, (uN, uN1), w_pair) / np.sqrt(eps)


def ergodic_series(noise_factory, seeds, psi_win, traces, eps, N, J_tail=8):
    """X[s, j], Y[s, j] for j = 1..N and each seed, generating only the rows that carry signal.

    noise_factory(seed, n_windows) returns a NoiseRealization on traces.lattice.
    """
    lat = traces.lattice
    J = min(J_tail, traces.J)
    psi_rows = np.flatnonzero(np.abs(psi_win).max(axis=1) > 0)
    need = np.union1d(psi_rows, np.concatenate([traces.rows[k] for k in range(J)]))
    lo, hi = int(need.min()), int(need.max()) + 1
    psi_sub = psi_win[lo:hi]
    w_sub = np.stack([traces.windows[k][lo:hi] for k in range(J)])  # (J, rows, n_l)
    chi_sub = chi_plus(lat.times(1)[lo:hi])[:, None]
    cellw = lat.dt * lat.dl / np.sqrt(eps)
    X = np.zeros((len(seeds), N), dtype=complex)
    Y = np.zeros((len(seeds), N), dtype=complex)
    for si, seed in enumerate(seeds):
        noise = noise_factory(seed, N)
        P = np.zeros((N + 1, J), dtype=complex)  # P[m, k] = <W^m, w_k>
        for m in range(1, N + 1):
            Wm = noise.rows(m, lo, hi)
            X[si, m - 1] = np.sum(Wm * psi_sub) * cellw
            if m == 1:
                P[m] = np.einsum("rl,krl->k", Wm * chi_sub, w_sub) * cellw
            else:
                P[m] = np.einsum("rl,krl->k", Wm, w_sub) * cellw
        for j in range(1, N + 1):
            ks = np.arange(min(J, j))
            Y[si, j - 1] = np.sum(P[j - ks, ks])
    return X, Y


@dataclass
class BetaEstimate:
    value: complex
    n_windows: int
    std_error: float
    method: str


def ergodic_estimate(products, method="ergodic-direct"):
    """Mean of X^j Y^j over j with a delete-one jackknife standard error."""
    z = np.asarray(products, dtype=complex)
    N = len(z)
    mean = z.mean()
    if N == 1:
        return BetaEstimate(complex(mean), 1, 0.0, method)
    loo = (z.sum() - z) / (N - 1)
    var = (N - 1) / N * np.sum(np.abs(loo - loo.mean()) ** 2)
    return BetaEstimate(complex(mean), N, float(np.sqrt(var)), method)


def write_sample_log(path, rows):
    """rows: iterables of (seed, j, pt_id, pgb_id, eps, X, Y_direct, Y_data)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "j", "pt_id", "pgb_id", "epsilon", "Re X", "Im X",
                     "Re Y_direct", "Im Y_direct", "Re Y_data", "Im Y_data"])
        for seed, j, pt_id, pgb_id, eps, X, Yd, Ydata in rows:
            Ydata = np.nan if Ydata is None else Ydata
            wr.writerow([seed, j, pt_id, pgb_id, f"{eps:.6g}",
                         f"{np.real(X):.12g}", f"{np.imag(X):.12g}",
                         f"{np.real(Yd):.12g}", f"{np.imag(Yd):.12g}",
                         f"{np.real(Ydata):.12g}", f"{np.imag(Ydata):.12g}"])


# -- data path ------------------------------------------------------------------------

def data_path_samples(noise, grid, background_grid, backward, eps, band_steps, n_windows=None):
    """Y_direct and Y_data for windows j = 1..n_windows of one realization.

    Y_direct pairs W with the true-metric beam trace; Y_data uses only the
    measurement L W, the known background and the beam data at T.
    """
    from .wavesolver import measurement, exterior_solve
    lat = noise.lattice
    n_windows = noise.n_windows if n_windows is None else n_windows
    meas = measurement(noise, grid, background_grid)
    ext = exterior_solve(background_grid, meas.scattered, range(1, n_windows + 1), lat.n_t, band_steps)
    traces = trace_windows_from_solver(backward, lat, n_windows)
    w_pair = (backward.w_T, backward.w_T1)
    Yd = np.zeros(n_windows, dtype=complex)
    Ydata = np.zeros(n_windows, dtype=complex)
    Yfull = np.zeros(n_windows, dtype=complex)
    for j in range(1, n_windows + 1):
        Yd[j - 1] = y_sample_direct(noise, traces, eps, j)
        Ydata[j - 1] = y_sample_data(background_grid, meas.incoming.snapshots[j], ext[j * lat.n_t], w_pair, eps)
        Yfull[j - 1] = snapshot_pairing(grid, meas.full.snapshots[j], w_pair) / np.sqrt(eps)
    return {"Y_direct": Yd, "Y_data": Ydata, "Y_full_snapshot": Yfull,
            "Y_incoming_only": np.array([snapshot_pairing(background_grid, meas.incoming.snapshots[j], w_pair)
                                         for j in range(1, n_windows + 1)]) / np.sqrt(eps)}


# -- second-order statistics ----------------------------------------------------------

def variance_vs_N(products, Ns):
    """Var over seeds of beta_{eps,N} = mean_{j<=N} X^j Y^j, for each N."""
    P = np.asarray(products)
    return np.array([np.var(P[:, :N].mean(axis=1), ddof=1) for N in Ns])


def loglog_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def cross_covariance(products, lags):
    """|E (P^j - beta)(P^k - beta)^*| at |j - k| = lag, averaged over seeds and j."""
    P = np.asarray(products)
    D = P - P.mean()
    out = []
    for d in lags:
        c = np.mean(D[:, :-d] * np.conj(D[:, d:]))
        se = np.std(D[:, :-d] * np.conj(D[:, d:])) / np.sqrt(D[:, d:].size)
        out.append((abs(c), se))
    return np.array(out)


# -- Gaussian lemmas ---------------------------------------------------------------

def _mixing(rng, n_vars, dim=6):
    return rng.normal(size=(n_vars, dim)) + 1j * rng.normal(size=(n_vars, dim))


def _pair_moments(A):
    """E Z_a Z_b and E Z_a conj Z_b for Z = A g, g real standard normal."""
    return A @ A.T, A @ A.conj().T


def fourth_moment_identity(A, n_samples, rng):
    """Monte-Carlo E|XY|^2 against |E X Ybar|^2 + |E XY|^2 + E|X|^2 E|Y|^2; returns (mc, se, exact, terms)."""
    M, Mc = _pair_moments(A)
    terms = (abs(Mc[0, 1]) ** 2, abs(M[0, 1]) ** 2, (Mc[0, 0] * Mc[1, 1]).real)
    exact = sum(terms)
    g = rng.normal(size=(A.shape[1], n_samples))
    Z = A @ g
    v = np.abs(Z[0] * Z[1]) ** 2
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n_samples)), float(exact), terms


def isserlis4(A):
    """E[X Y Z V] for Z = A g (rows X, Y, Z, V)."""
    M, _ = _pair_moments(A)
    return M[0, 1] * M[2, 3] + M[0, 2] * M[1, 3] + M[0, 3] * M[1, 2]


def simple_ineq_ratio(N, p):
    """N^2 |S_N| / N^{3/2} for c_jk = |j - k|^{-p}, with the bound N + int_1^{N-1} (N-s) s^{-p} ds."""
    ell = np.arange(1, N, dtype=float)
    total = float(np.sum((N - ell) * ell ** -p))
    s = np.linspace(1.0, N - 1.0, 20001)
    bound = N + float(np.trapezoid((N - s) * s ** -p, s)) if N > 2 else N
    return total / N ** 1.5, total <= bound + 1e-9 * bound


def gaussian_lemma_suite(n_seeds=20000, n_structures=100, seed=0, products=None, lags=None,
                         decay_max=-0.35, z_max=5.0):
    """Items (a)-(d); raises LemmaFail naming the violated item.

    products: optional (seeds, N) array of X^j Y^j for item (c).
    """
    rng = np.random.default_rng(seed)
    report = {"a": [], "b": [], "c": None, "d": []}
    # (a) canonical cases then random structures
    e1 = np.zeros((2, 4), complex)
    e1[0, :2] = [1, 1j]
    e1[1, 2:] = [1, 1j]
    same = np.array([[1, 1j, 0, 0], [1, 1j, 0, 0]], complex)
    cases = [("independent", e1 / np.sqrt(2)), ("identical", same / np.sqrt(2))]
    cases += [(f"random{k}", _mixing(rng, 2, 4) / 2) for k in range(8)]
    for name, A in cases:
        mc, se, exact, terms = fourth_moment_identity(A, n_seeds, rng)
        report["a"].append({"case": name, "mc": mc, "se": se, "exact": exact, "terms": terms,
                            "z": (mc - exact) / se})
    # (b) fourth-moment bound, exact by Isserlis and by Monte Carlo
    worst = 0.0
    for k in range(n_structures):
        A = _mixing(rng, 4)
        _, Mc = _pair_moments(A)
        bound = 3 * np.sqrt(np.prod(Mc.diagonal().real))
        val = abs(isserlis4(A))
        g = rng.normal(size=(A.shape[1], 4000))
        Z = A @ g
        mc = abs(np.mean(Z[0] * Z[1] * Z[2] * Z[3]))
        worst = max(worst, val / bound)
        report["b"].append({"structure": k, "exact": val, "mc": mc, "bound": bound})
    report["b_worst_ratio"] = worst
    # (c) cross-window covariance decay
    if products is not None:
        P = np.asarray(products)
        lags = lags if lags is not None else np.unique(np.geomspace(1, max(2, P.shape[1] // 4), 8).astype(int))
        cov = cross_covariance(P, lags)
        report["c"] = {"lags": lags, "abs_cov": cov[:, 0], "se": cov[:, 1],
                       "exponent": loglog_slope(lags, cov[:, 0])}
    # (d) simple inequality on synthetic sequences
    for p in (0.5, 0.75, 1.0, 2.0):
        ratios = [simple_ineq_ratio(N, p) for N in (16, 64, 256, 1024, 4096)]
        report["d"].append({"p": p, "ratios": [r for r, _ in ratios], "within_bound": all(ok for _, ok in ratios)})
    bad = []
    if any(abs(r["z"]) > z_max for r in report["a"]):
        bad.append("a")
    if worst > 1.0:
        bad.append("b")
    if report["c"] is not None and report["c"]["exponent"] > decay_max:
        bad.append("c")
    if not all(r["within_bound"] for r in report["d"]) or max(max(r["ratios"]) for r in report["d"]) > 4.0 / 3.0 + 1.0:
        bad.append("d")
    if bad:
        raise LemmaFail(f"lemma checks failed: {bad}", report)
    return report


# -- long-time tail in free space -------------------------------------------------------

def free_space_tail(beam, eps, n_windows, data_step=0.04, n_l=96, n_s=24, dt_fd=1e-4):
    """Boundary L^2 norm of w over windows k = 1..n_windows before time 0 (Euclidean exterior and interior).

    w continues the Cauchy data (w(T), d_t w(T)) backward by the 2D Poisson formula
        v(s, x) = -(1/2pi) int w(T) s (s^2 - r^2)^{-3/2} - (1/2pi) int d_t w(T) (s^2 - r^2)^{-1/2},
    s = T - t, r = |x - y|; valid when s exceeds the largest data-to-boundary distance.
    Window k covers beam times [-kT, -(k-1)T).
    """
    if not beam.metric.is_euclidean:
        raise ValueError("the Poisson formula needs the Euclidean metric")
    T = beam.T
    z = np.asarray(beam.skeleton.anchor.z, float)
    g = np.arange(-beam.rho, beam.rho + 0.5 * data_step, data_step)
    Xg, Yg = np.meshgrid(z[0] + g, z[1] + g, indexing="ij")
    ys = np.stack([Xg.ravel(), Yg.ravel()], axis=-1)
    u0 = beam.evaluate(T, ys, eps)
    u1 = (beam.evaluate(T + dt_fd, ys, eps) - beam.evaluate(T - dt_fd, ys, eps)) / (2 * dt_fd)
    keep = (np.abs(u0) > 0) | (np.abs(u1) > 0)
    ys, u0, u1 = ys[keep], u0[keep] * data_step ** 2, u1[keep] * data_step ** 2
    ls = beam.metric.circumference * np.arange(n_l) / n_l
    xs = beam.metric.boundary_point(ls)
    r2 = np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=-1)   # (n_l, n_data)
    if np.sqrt(r2.max()) >= T:
        raise ValueError("window length shorter than the data-to-boundary distance")
    nodes, weights = np.polynomial.legendre.leggauss(n_s)
    dl = beam.metric.circumference / n_l
    norms = np.zeros(n_windows)
    for k in range(1, n_windows + 1):
        s = T + (k - 1) * T + 0.5 * T * (nodes + 1)
        q = s[:, None, None] ** 2 - r2[None]
        v = -(np.einsum("snd,d->sn", s[:, None, None] * q ** -1.5, u0)
              + np.einsum("snd,d->sn", q ** -0.5, u1)) / (2 * np.pi)
        norms[k - 1] = 0.5 * T * np.sum(weights[:, None] * np.abs(v) ** 2) * dl
    return norms


def tail_from_windows(norms, T):
    """Tail sums sum_{k >= J} norms[k-1], J = 1..len, plus the c/s remainder fitted to the last windows."""
    K = len(norms)
    s_end = (K + 1) * T
    # |v|^2 ~ c / s^2 at large s, so a window integrates to c T / s^2 and the remainder is c / s_end
    s_mid = (np.arange(K - 4, K) + 1.5) * T
    c = float(np.mean(norms[-4:] * s_mid ** 2 / T))
    rest = c / s_end
    tails = np.cumsum(norms[::-1])[::-1] + rest
    return tails, rest


def inverse_power_band(J, tails):
    """C = geometric-mean fit of tails ~ C / J; returns (C, max ratio deviation, slope)."""
    J = np.asarray(J, float)
    C = float(np.exp(np.mean(np.log(tails * J))))
    ratio = tails * J / C
    return C, float(max(ratio.max(), 1.0 / ratio.min())), loglog_slope(J, tails)
