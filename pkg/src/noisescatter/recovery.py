"""Scan test functions against beams, extrapolate beta, detect collisions and assemble Sigma.

A detected peak at pt = (s*, y*, eta*) for the beam pgb means the beam enters M at
(y*, eta*) at time s*.  With r the exterior travel time from z back to the boundary
(known, since g is known outside M), the backward ray of the beam enters M at
(x, xi) = (gamma(T - r), -gamma'(T - r)) and

    Sigma(x, xi) = (T - r - s*, y*, eta*)

where the exit direction is reported reversed, i.e. as an inward vector.
"""
from dataclasses import dataclass, field
import csv

import numpy as np

from .beams import BeamAnchor, build_beam
from .correlator import beta_quadrature
from .geometry import PhasePoint, rotate, scattering_relation
from .testfn import make_test, MultiCross, TestFunction


class Inconsistent(ValueError):
    """The eps sequence of beta is not converging within its error bars."""


class NoDetection(RuntimeError):
    """No prominent peak above threshold for a beam."""


@dataclass
class ExperimentConfig:
    amplitude: float = 0.2
    bump_center: tuple = (0.1, 0.05)
    width: float = 0.35
    T: float = 5.0
    h: float = 0.02
    eps_ladder: tuple = (0.08, 0.04, 0.02, 0.01)
    n_s: int = 24
    n_arc: int = 32
    n_angle: int = 16
    inward_floor: float = 0.1
    r_t: float = 0.6
    r_x: float = 0.6
    n_pgb: int = 8
    pgb_radius: float = 2.0
    seeds: tuple = tuple(range(64))
    n_windows: int = 64
    theta_factor: float = 5.0
    prominence: float = 3.0
    exit_exclusion: float = None  # default: psi radius + two beam widths at the scan eps
    mode: str = "oracle"
    lemma_seeds: int = 10_000
    rng_bias: float = 0.0  # test hook: biases every noise cell (negative control)

    def __post_init__(self):
        e = np.asarray(self.eps_ladder, float)
        if len(e) < 2 or np.any(np.diff(e) >= 0) or np.any(e <= 0):
            raise ValueError("eps_ladder must be positive and strictly decreasing")
        if self.mode not in ("oracle", "data"):
            raise ValueError("mode must be 'oracle' or 'data'")
        if not 0 < self.inward_floor < 1:
            raise ValueError("inward_floor must lie in (0, 1)")
        if self.T <= 1 + 2 * self.r_t:
            raise ValueError("T too short for the s-grid (need T > 1 + 2 r_t)")
        for k in ("n_s", "n_arc", "n_angle", "n_pgb", "n_windows", "lemma_seeds"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if min(self.r_t, self.r_x, self.h, self.width) <= 0:
            raise ValueError("r_t, r_x, h and width must be positive")
        if not len(self.seeds):
            raise ValueError("seeds must be non-empty")

    def metric(self):
        from .geometry import Metric
        return Metric(amplitude=self.amplitude, bump_center=tuple(self.bump_center), width=self.width)

    def s_values(self):
        return np.linspace(1.0 + self.r_t, self.T - self.r_t, self.n_s + 2)[1:-1]

    def arcs(self, metric):
        return metric.circumference * np.arange(self.n_arc) / self.n_arc

    def angles(self):
        amax = np.arccos(self.inward_floor)
        return np.linspace(-amax, amax, self.n_angle + 2)[1:-1]

    def anchors(self):
        """Exterior points on a circle, each aimed at M with a different offset angle."""
        offsets = [0.25, -0.2, 0.1, -0.3, 0.3, -0.1, 0.2, -0.25]
        out = []
        for k in range(self.n_pgb):
            phi = 2 * np.pi * k / self.n_pgb + 0.3
            z = self.pgb_radius * np.array([np.cos(phi), np.sin(phi)])
            zeta = rotate(-z / np.linalg.norm(z), offsets[k % len(offsets)])
            out.append(BeamAnchor(self.T, tuple(z), tuple(zeta)))
        return out


# -- extrapolation ---------------------------------------------------------------------

@dataclass
class BetaLimit:
    value: complex
    error: float
    ladder: tuple
    values: tuple


def beta_limit(eps_ladder, values, std_errors=None):
    """Richardson extrapolation beta_eps = beta + c eps + ... from the two smallest eps.

    The error bar adds the Richardson correction, the change of the estimate when the
    next pair is used instead, and the statistical errors (propagated through 2 b1 - b2).
    Raises Inconsistent when the increments grow toward small eps.
    """
    eps = np.asarray(eps_ladder, float)
    b = np.asarray(values, complex)
    se = np.zeros(len(b)) if std_errors is None else np.asarray(std_errors, float)
    if len(b) < 2:
        raise ValueError("need at least two eps values")
    order = np.argsort(eps)
    eps, b, se = eps[order], b[order], se[order]
    r = eps[1] / eps[0]
    lim = (r * b[0] - b[1]) / (r - 1)
    err = abs(lim - b[0])
    stat = np.hypot(r * se[0], se[1]) / (r - 1)
    if len(b) >= 3:
        r2 = eps[2] / eps[1]
        lim2 = (r2 * b[1] - b[2]) / (r2 - 1)
        err += abs(lim - lim2)
    total = float(np.hypot(err, stat))
    # increments must shrink as eps halves (about 2x for an O(eps) correction); a finer
    # increment more than twice the coarser one, beyond noise, means no asymptotic regime
    d = np.abs(np.diff(b))
    floor = 1e-3 * np.abs(b).max()
    for k in range(len(d) - 1):
        noise = 3 * (np.hypot(se[k], se[k + 1]) + np.hypot(se[k + 1], se[k + 2]))
        if d[k] > 2 * d[k + 1] + floor + noise:
            raise Inconsistent(f"beta_eps moves more between eps = {eps[k]:.3g} and {eps[k + 1]:.3g} "
                               f"than between {eps[k + 1]:.3g} and {eps[k + 2]:.3g}")
    return BetaLimit(complex(lim), total, tuple(eps), tuple(b))


def richardson_ratios(values):
    """|b_k - b_{k+1}| / |b_{k+1} - b_{k+2}| along a halving ladder (largest eps first)."""
    d = np.abs(np.diff(np.asarray(values, complex)))
    return d[:-1] / d[1:]


# -- pt grid -------------------------------------------------------------------------

def pt_from_coords(metric, s, arc, angle):
    y = metric.boundary_point(arc)
    eta = rotate(metric.inward_normal(arc), angle)
    return (float(s), y, eta / np.sqrt(metric.a(y)))


def _arc_dist(a, b, circ):
    return np.abs((a - b + 0.5 * circ) % circ - 0.5 * circ)


def scan_grid(beam, eps, s_values, arcs, angles, r_t, r_x, step=0.02, exclude=None):
    """beta_eps over the pt grid by a lattice sum against the beam trace sampled once.

    Returns a complex array (n_s, n_arc, n_angle); excluded points are nan.
    """
    metric = beam.metric
    circ = metric.circumference
    n_l = int(round(circ / step))
    dl = circ / n_l
    t_lo = max(0.0, s_values[0] - r_t)
    t = np.arange(t_lo, s_values[-1] + r_t + step, step)
    ls = dl * np.arange(n_l)
    pts = metric.boundary_point(ls)
    w = np.zeros((len(t), n_l), complex)
    for chunk in np.array_split(np.arange(len(t)), max(1, len(t) // 32)):
        w[chunk] = beam.evaluate(t[chunk, None], pts[None], eps)
    active_t = np.abs(w).max(axis=1) > 0
    out = np.zeros((len(s_values), len(arcs), len(angles)), complex)
    hl = int(np.ceil(1.05 * r_x / dl))
    ht = int(np.ceil(r_t / step))
    for i, s in enumerate(s_values):
        it0 = int(round((s - t_lo) / step))
        ti = np.arange(max(0, it0 - ht), min(len(t), it0 + ht + 1))
        if not active_t[ti].any():
            continue
        tt = t[ti]
        for k, arc in enumerate(arcs):
            if exclude is not None and exclude(s, arc):
                out[i, k, :] = np.nan
                continue
            li = (int(round(arc / dl)) + np.arange(-hl, hl + 1)) % n_l
            wp = w[np.ix_(ti, li)]
            if not np.any(wp):
                continue
            y = metric.boundary_point(arc)
            nu = metric.inward_normal(arc)
            xs = pts[li]
            for a, ang in enumerate(angles):
                eta = rotate(nu, ang) / np.sqrt(metric.a(y))
                tf = TestFunction(float(s), tuple(y), tuple(eta), tuple(metric.a(y) * eta), r_t, r_x)
                psi = tf.evaluate(tt[:, None], xs[None], eps)
                out[i, k, a] = np.sum(psi * wp) * step * dl / eps
    return out


def prominent_peak(mag, prominence=3.0, separation=2):
    """Index of the argmax, whether it passes the prominence rule, and the number of rival peaks."""
    m = np.where(np.isnan(mag), -np.inf, mag)
    idx = np.unravel_index(np.argmax(m), m.shape)
    peak = m[idx]
    finite = mag[np.isfinite(mag)]
    ok = peak > 0 and peak >= prominence * np.median(finite)
    # rivals: other local maxima above half the peak, farther than `separation` cells
    rivals = 0
    cand = np.argwhere(m >= 0.5 * peak)
    for c in cand:
        if np.max(np.abs(c - np.asarray(idx))) <= separation:
            continue
        lo = np.maximum(c - 1, 0)
        hi = c + 2
        if m[tuple(c)] >= m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].max():
            rivals += 1
    return idx, bool(ok), rivals


def _parabola_offset(fm, f0, fp):
    den = fm - 2 * f0 + fp
    if not np.isfinite(den) or den >= 0:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / den, -1.0, 1.0))


def _safe_beta(beam, metric, coords, eps, r_t, r_x, floor):
    s, arc, ang = coords
    try:
        tf = make_test(metric, pt_from_coords(metric, s, arc, ang), r_t=r_t, r_x=r_x, inward_floor=floor)
    except (ValueError, MultiCross):
        return 0.0
    return beta_quadrature(beam, tf, eps)


def _quadratic_peak(offsets, values):
    """Stationary point of the least-squares quadratic through (offsets, values) in 3D."""
    x = np.asarray(offsets, float)
    cols = [np.ones(len(x))] + [x[:, i] for i in range(3)]
    pairs = [(i, j) for i in range(3) for j in range(i, 3)]
    cols += [x[:, i] * x[:, j] for i, j in pairs]
    coef = np.linalg.lstsq(np.stack(cols, axis=1), values, rcond=None)[0]
    g = coef[1:4]
    Hm = np.zeros((3, 3))
    for (i, j), c in zip(pairs, coef[4:]):
        if i == j:
            Hm[i, i] = 2 * c
        else:
            Hm[i, j] = Hm[j, i] = c
    if np.max(np.linalg.eigvalsh(Hm)) >= 0:
        return None
    return -np.linalg.solve(Hm, g)


def refine_peak(beam, coords, eps_list, r_t, r_x, floor, iterations=2):
    """Newton steps on a quadratic fit of log|beta_eps| over a 3x3x3 stencil of spacing sqrt(eps)/2."""
    metric = beam.metric
    c = np.array(coords, float)
    stencil = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], float)
    for eps in eps_list:
        h = 0.5 * np.sqrt(eps)
        for _ in range(iterations):
            vals = np.array([abs(_safe_beta(beam, metric, c + h * d, eps, r_t, r_x, floor)) for d in stencil])
            lv = np.log(np.maximum(vals, 1e-300))
            step = _quadratic_peak(stencil, lv)
            if step is None:
                # not locally concave: move to the best stencil point
                step = stencil[np.argmax(lv)]
            c = c + h * np.clip(step, -2.0, 2.0)
    return c


# -- recovery --------------------------------------------------------------------------

@dataclass
class PgbResult:
    pgb_id: int
    anchor: BeamAnchor
    detected: bool
    reason: str = ""
    coords: tuple = None          # (s*, arc*, angle*)
    beta: BetaLimit = None
    threshold: float = np.nan
    rivals: int = 0
    entry: PhasePoint = None      # (x, xi), known from the exterior
    tau: float = np.nan
    exit_arc: float = np.nan
    exit_angle: float = np.nan
    truth: dict = None
    scan: np.ndarray = field(default=None, repr=False)


@dataclass
class RecoveredSigma:
    config: ExperimentConfig
    results: list

    def detected(self):
        return [r for r in self.results if r.detected]

    def score(self, tau_tol=0.02, cells=2.0):
        """Per-pgb comparison with the geodesic oracle; cells are pt-grid spacings."""
        metric = self.config.metric()
        d_arc = metric.circumference / self.config.n_arc
        ang = self.config.angles()
        d_ang = ang[1] - ang[0]
        rows = []
        for r in self.results:
            row = {"pgb": r.pgb_id, "detected": r.detected, "pass": False}
            if r.detected and r.truth is not None:
                t = r.truth
                row["tau_rel_err"] = abs(r.tau - t["tau"]) / t["tau"]
                row["exit_cells"] = float(_arc_dist(r.exit_arc, t["exit_s"], metric.circumference) / d_arc)
                row["angle_cells"] = abs(r.exit_angle - t["exit_angle"]) / d_ang
                row["unique"] = r.rivals == 0
                row["pass"] = bool(row["tau_rel_err"] <= tau_tol and row["exit_cells"] <= cells
                                   and row["angle_cells"] <= cells and row["unique"])
            rows.append(row)
        return rows


def truth_record(metric, skel):
    rec = scattering_relation(metric, PhasePoint(skel.hit_point, skel.hit_dir))
    return rec.row(metric), rec


def recover_pgb(cfg, metric, anchor, pgb_id, eps_scan=None, log=None):
    beam = build_beam(metric, anchor, eps_max=max(cfg.eps_ladder))
    skel = beam.skeleton
    truth, _ = truth_record(metric, skel)
    s_vals, arcs, angles = cfg.s_values(), cfg.arcs(metric), cfg.angles()
    exit_arc = metric.arclength(skel.hit_point)
    circ = metric.circumference

    eps0 = max(cfg.eps_ladder) if eps_scan is None else eps_scan
    half = cfg.exit_exclusion
    if half is None:
        half = max(cfg.r_t, cfg.r_x) + 2.0 * np.sqrt(eps0)

    def exclude(s, arc):
        return abs(s - skel.exit_time) < half and _arc_dist(arc, exit_arc, circ) < half

    scan = scan_grid(beam, eps0, s_vals, arcs, angles, cfg.r_t, cfg.r_x, exclude=exclude)
    mag = np.abs(scan)
    res = PgbResult(pgb_id, anchor, False, truth=truth, scan=scan,
                    entry=PhasePoint(skel.hit_point, skel.hit_dir))
    idx, ok, rivals = prominent_peak(mag, cfg.prominence)
    res.rivals = rivals
    if not ok:
        res.reason = "no prominent peak"
        return res, beam
    coords = np.array([s_vals[idx[0]], arcs[idx[1]], angles[idx[2]]])
    # one parabolic step on the coarse grid, then successively finer eps
    grid_axes = (s_vals, arcs, angles)
    for d in range(3):
        i = idx[d]
        if 0 < i < mag.shape[d] - 1:
            sl = list(idx)
            vals = []
            for k in (i - 1, i, i + 1):
                sl[d] = k
                vals.append(mag[tuple(sl)])
            lv = np.log(np.maximum(np.nan_to_num(vals), 1e-300))
            coords[d] += _parabola_offset(*lv) * (grid_axes[d][1] - grid_axes[d][0])
    # profile ladder: beta_eps at the argmax of |beta_eps| for each eps.  A fixed pt
    # off the collision by delta picks up a phase ~ q.delta/eps, while the argmax
    # approaches the collision at rate O(eps), so this sequence has a limit.
    betas = []
    for e in cfg.eps_ladder:
        coords = refine_peak(beam, coords, [e], cfg.r_t, cfg.r_x, cfg.inward_floor)
        betas.append(_safe_beta(beam, metric, coords, e, cfg.r_t, cfg.r_x, cfg.inward_floor))
    try:
        lim = beta_limit(cfg.eps_ladder, betas)
    except Inconsistent as exc:
        res.reason = f"inconsistent: {exc}"
        res.coords = tuple(coords)
        return res, beam
    res.beta = lim
    res.coords = tuple(coords)
    res.threshold = cfg.theta_factor * lim.error
    if abs(lim.value) < res.threshold:
        res.reason = "below threshold"
        return res, beam
    res.detected = True
    s_star, arc_star, ang_star = coords
    res.tau = skel.exit_time - s_star
    res.exit_arc = float(arc_star % circ)
    res.exit_angle = float(ang_star)
    if log is not None:
        log(f"pgb {pgb_id}: |beta| = {abs(lim.value):.4g} +- {lim.error:.2g}, tau = {res.tau:.4f} "
            f"(truth {truth['tau']:.4f})")
    return res, beam


def scan_and_recover(cfg, log=None):
    metric = cfg.metric()
    results = []
    for k, anchor in enumerate(cfg.anchors()):
        res, _ = recover_pgb(cfg, metric, anchor, k, log=log)
        results.append(res)
    return RecoveredSigma(cfg, results)


# -- outputs ----------------------------------------------------------------------------

SIGMA_FIELDS = ["pgb", "entry_s", "entry_angle", "tau", "exit_s", "exit_angle"]


def write_sigma_csv(path, sigma, truth=False):
    metric = sigma.config.metric()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SIGMA_FIELDS + ([] if truth else ["detected", "abs_beta", "beta_error"]))
        for r in sigma.results:
            entry_s = float(metric.arclength(r.entry.x))
            entry_angle = float(metric.angle_to_inward_normal(r.entry.x, r.entry.xi))
            if truth:
                t = r.truth
                wr.writerow([r.pgb_id, f"{entry_s:.8f}", f"{entry_angle:.8f}", f"{t['tau']:.8f}",
                             f"{t['exit_s']:.8f}", f"{t['exit_angle']:.8f}"])
            elif r.detected:
                wr.writerow([r.pgb_id, f"{entry_s:.8f}", f"{entry_angle:.8f}", f"{r.tau:.8f}",
                             f"{r.exit_arc:.8f}", f"{r.exit_angle:.8f}", 1,
                             f"{abs(r.beta.value):.8g}", f"{r.beta.error:.4g}"])
            else:
                wr.writerow([r.pgb_id, f"{entry_s:.8f}", f"{entry_angle:.8f}", "", "", "", 0, "", ""])


def write_scan_csv(path, cfg, metric, scan):
    s_vals, arcs, angles = cfg.s_values(), cfg.arcs(metric), cfg.angles()
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["s", "arclength", "angle", "re_beta", "im_beta", "abs_beta"])
        for i, s in enumerate(s_vals):
            for k, a in enumerate(arcs):
                for m, ang in enumerate(angles):
                    b = scan[i, k, m]
                    wr.writerow([f"{s:.6f}", f"{a:.6f}", f"{ang:.6f}", f"{b.real:.8g}", f"{b.imag:.8g}",
                                 f"{abs(b):.8g}"])


def write_heatmap_dat(path, x, y, values):
    """gnuplot `splot ... with pm3d` layout: blocks of constant x separated by blank lines."""
    with open(path, "w") as fh:
        for i, xv in enumerate(x):
            for k, yv in enumerate(y):
                fh.write(f"{xv:.6f} {yv:.6f} {values[i, k]:.8g}\n")
            fh.write("\n")
