"""Command-line driver: noisescatter <subcommand> CONFIG [--out DIR].

Exit codes: 0 ok, 2 assumption failure, 3 acceptance-threshold failure,
4 config or usage error.
"""
import argparse
import csv
import os
import sys
import time

import numpy as np

from .config import ConfigError, dump_config, load_config

EXIT_OK, EXIT_ASSUMPTION, EXIT_THRESHOLD, EXIT_CONFIG = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _write_summary(out, name, lines):
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(f"# noisescatter {name}\n")
        for line in lines:
            fh.write(f"{line}\n")


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


# -- check-assumptions ------------------------------------------------------------------

def cmd_check_assumptions(cfg, args):
    from .geometry import check_assumptions
    metric = cfg.metric()
    rep = check_assumptions(metric, inward_floor=cfg.inward_floor)
    with open(os.path.join(args.out, "assumptions.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["assumption", "ok"])
        for name in ("A1", "A2", "A3"):
            wr.writerow([name, int(not any(v.startswith(name) for v in rep.violations))])
    lines = [f"ok: {rep.ok}"] + [f"violation: {v}" for v in rep.violations]
    lines += [f"{k}: {v}" for k, v in rep.details.items() if np.isscalar(v)]
    _write_summary(args.out, "check-assumptions", lines)
    for line in lines:
        _say(args, line)
    return EXIT_OK if rep.ok else EXIT_ASSUMPTION


# -- beams ------------------------------------------------------------------------------

def cmd_beams(cfg, args):
    from .beams import build_beam, write_diagnostics_csv
    from .recovery import truth_record
    from . import plotting
    metric = cfg.metric()
    beams, lines = [], []
    for k, anchor in enumerate(cfg.anchors()):
        beam = build_beam(metric, anchor, eps_max=max(cfg.eps_ladder))
        beams.append(beam)
        write_diagnostics_csv(os.path.join(args.out, f"beam_{k}.csv"), beam, beam_id=k)
        sk = beam.skeleton
        truth, _ = truth_record(metric, sk)
        lines.append(f"beam {k}: z = ({anchor.z[0]:.4f}, {anchor.z[1]:.4f}) t_hit = {sk.t_hit:.5f} "
                     f"tau = {sk.tau:.5f} entry_time = {sk.entry_time:.5f} rho = {beam.rho:.4f} "
                     f"beta_theta = {beam.beta_theta:.4g} entry_s = {truth['entry_s']:.5f}")
    if not args.no_figures:
        plotting.beam_track(os.path.join(args.out, "beam_tracks.png"), metric, beams)
    _write_summary(args.out, "beams", lines)
    for line in lines:
        _say(args, line)
    return EXIT_OK


# -- direct -----------------------------------------------------------------------------

def _grids(cfg, metric, box_factor=3.0):
    from .wavesolver import Grid
    grid = Grid.for_metric(metric, cfg.h, cfg.T, box_factor=box_factor)
    bg = Grid(metric.background(), grid.h, grid.dt, grid.half_width, grid.sponge_width, n_l=grid.n_l)
    return grid, bg


def cmd_direct(cfg, args):
    from .noise import sample
    from .wavesolver import measurement, write_snapshot, write_trace_csv
    metric = cfg.metric()
    grid, bg = _grids(cfg, metric)
    lat = grid.lattice(cfg.T)
    seed = cfg.seeds[0]
    noise = sample(seed, lat, args.windows, cfg.rng_bias)
    t0 = time.time()
    meas = measurement(noise, grid, bg)
    arcs = lat.arclengths()
    write_trace_csv(os.path.join(args.out, "trace_scattered.csv"), meas.scattered, lat.dt, arcs,
                    stride=args.stride)
    write_trace_csv(os.path.join(args.out, "trace_full.csv"), meas.full.trace, lat.dt, arcs,
                    stride=args.stride)
    for j, (u, _) in meas.full.snapshots.items():
        write_snapshot(os.path.join(args.out, f"snapshot_{j}.bin"), grid, u, j * cfg.T)
    rms = np.sqrt(np.mean(meas.scattered ** 2))
    lines = [f"seed: {seed}", f"windows: {args.windows}", f"grid: {grid.n} cells h = {grid.h}",
             f"lattice: n_t = {lat.n_t} n_l = {lat.n_l} dt = {lat.dt:.6g}",
             f"scattered trace rms: {rms:.6g}", f"full trace rms: {np.sqrt(np.mean(meas.full.trace ** 2)):.6g}",
             f"time: {time.time() - t0:.1f}s"]
    _write_summary(args.out, "direct", lines)
    for line in lines:
        _say(args, line)
    return EXIT_OK


# -- correlate --------------------------------------------------------------------------

def _colliding_setup(cfg, metric, pgb, eps):
    """Beam of one pgb and the test function sitting on its boundary entry."""
    from .beams import build_beam
    from .recovery import pt_from_coords
    from .testfn import make_test
    beam = build_beam(metric, cfg.anchors()[pgb], eps_max=max(cfg.eps_ladder), max_rho=0.85)
    sk = beam.skeleton
    p = beam._splines["p"](sk.entry_time)
    y = beam._splines["gamma"](sk.entry_time)
    pt = pt_from_coords(metric, sk.entry_time, float(metric.arclength(y)),
                        float(metric.angle_to_inward_normal(y, p)))
    tf = make_test(metric, pt, cfg.r_t, cfg.r_x, cfg.T, cfg.inward_floor)
    return beam, tf


def _coarse_lattice(cfg, metric):
    from .noise import BoundaryLattice
    from .wavesolver import Grid
    lat = Grid.for_metric(metric, cfg.h, cfg.T, multiple=4).lattice(cfg.T)
    return BoundaryLattice(cfg.T, lat.n_t // 4, lat.circumference, lat.n_l // 2)


def cmd_correlate(cfg, args):
    from . import correlator as co
    from . import plotting
    from .noise import sample
    metric = cfg.metric()
    eps = args.eps or max(cfg.eps_ladder)
    beam, tf = _colliding_setup(cfg, metric, args.pgb, eps)
    lat = _coarse_lattice(cfg, metric)
    traces = co.trace_windows_from_beam(beam, lat, eps)
    psi = co.psi_window(metric, lat, tf, eps)
    oracle = complex(co.beta_quadrature_lattice(metric, lat, tf, traces.windows[0], eps))
    seeds = list(cfg.seeds)
    t0 = time.time()
    X, Y = co.ergodic_series(lambda sd, n: sample(sd, lat, n, cfg.rng_bias), seeds, psi, traces, eps,
                             cfg.n_windows, J_tail=1)
    P = X * Y
    co.write_sample_log(os.path.join(args.out, "samples.csv"),
                        ((sd, j + 1, 0, args.pgb, eps, X[i, j], Y[i, j], None)
                         for i, sd in enumerate(seeds) for j in range(cfg.n_windows)))
    per_seed = P.mean(axis=1)
    mean = per_seed.mean()
    se = np.sqrt(np.mean(np.abs(per_seed - mean) ** 2) / max(1, len(seeds) - 1))
    z = abs(mean - oracle) / se if se > 0 else np.inf
    Ns = [n for n in (8, 32, 128, 512) if n <= cfg.n_windows] or [cfg.n_windows]
    lines = [f"pgb: {args.pgb}", f"eps: {eps}", f"seeds: {len(seeds)}", f"windows: {cfg.n_windows}",
             f"lattice: n_t = {lat.n_t} n_l = {lat.n_l}",
             f"beta_ergodic: {mean.real:.6g} {mean.imag:+.6g}i", f"std_error: {se:.4g}",
             f"beta_quadrature_lattice: {oracle.real:.6g} {oracle.imag:+.6g}i",
             f"beta_quadrature_formal: {complex(co.beta_quadrature(beam, tf, eps)):.6g}",
             f"z: {z:.3f}"]
    if len(seeds) > 1 and len(Ns) > 1:
        var = co.variance_vs_N(P, Ns)
        slope = co.loglog_slope(Ns, var)
        lines += [f"var_N {n}: {v:.4g}" for n, v in zip(Ns, var)] + [f"var_slope: {slope:.3f}"]
        if not args.no_figures:
            plotting.variance_vs_n(os.path.join(args.out, "variance_vs_N.png"), Ns, var, slope)
    ok = z <= 3.0
    lines += [f"time: {time.time() - t0:.1f}s", f"pass (mean within 3 SE of quadrature): {ok}"]
    _write_summary(args.out, "correlate", lines)
    for line in lines:
        _say(args, line)
    return EXIT_OK if ok else EXIT_THRESHOLD


# -- lemmas -----------------------------------------------------------------------------

def cmd_lemmas(cfg, args):
    from .correlator import LemmaFail, gaussian_lemma_suite
    from .noise import BoundaryLattice, CovarianceFail, covariance_suite
    lat = BoundaryLattice(1.0, 64, cfg.metric().circumference, 96)
    lines, code = [], EXIT_OK
    try:
        rows = covariance_suite(lat, cfg.lemma_seeds, seed0=int(cfg.seeds[0]), bias=cfg.rng_bias, z_max=3.0)
        lines.append("covariance: ok")
    except CovarianceFail as exc:
        rows = exc.rows
        lines.append(f"covariance: CovarianceFail: {exc}")
        code = EXIT_THRESHOLD
    with open(os.path.join(args.out, "covariance.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        wr.writerows(rows)
    lines += [f"  {r['pair']}: exact {r['exact']:.6g} empirical {r['empirical']:.6g} z {r['z']:+.2f}" for r in rows]
    try:
        rep = gaussian_lemma_suite(n_seeds=20000, n_structures=100, seed=int(cfg.seeds[0]))
        lines.append("gaussian lemmas: ok")
    except LemmaFail as exc:
        rep = exc.report
        lines.append(f"gaussian lemmas: LemmaFail: {exc}")
        code = EXIT_THRESHOLD
    if rep.get("a"):
        lines.append(f"  complex-Gaussian identity: max |z| {max(abs(r['z']) for r in rep['a']):.2f} "
                     f"over {len(rep['a'])} cases")
    if "b_worst_ratio" in rep:
        lines.append(f"  fourth-moment bound: worst ratio {rep['b_worst_ratio']:.3f} (bound 1)")
    if rep.get("c") is None:
        lines.append("  cross-window decay: skipped (needs ergodic products)")
    for r in rep.get("d") or []:
        lines.append(f"  simple inequality p = {r['p']}: max ratio {max(r['ratios']):.3f} "
                     f"within bound {r['within_bound']}")
    _write_summary(args.out, "lemmas", lines)
    for line in lines:
        _say(args, line)
    return code


# -- recover ----------------------------------------------------------------------------

def _data_check(cfg, metric, res, n_windows):
    """Ergodic-data estimate of beta at a detected peak vs its lattice quadrature."""
    from . import correlator as co
    from .beams import build_beam
    from .noise import sample
    from .recovery import pt_from_coords
    from .testfn import make_test
    from .wavesolver import cutoff_band_steps, solve_backward_beam
    eps = max(cfg.eps_ladder)
    beam = build_beam(metric, res.anchor, eps_max=eps, max_rho=0.85)
    grid, bg = _grids(cfg, metric, box_factor=3.5)
    lat = grid.lattice(cfg.T)
    bw = solve_backward_beam(beam, eps, grid, n_windows=n_windows)
    tf = make_test(metric, pt_from_coords(metric, *res.coords), cfg.r_t, cfg.r_x, cfg.T, cfg.inward_floor)
    psi = co.psi_window(metric, lat, tf, eps)
    oracle = complex(co.beta_quadrature_lattice(metric, lat, tf, bw.window(0, lat.n_t), eps))
    band = cutoff_band_steps(grid, cfg.T, 1.0 - beam.rho)
    noise = sample(cfg.seeds[0], lat, n_windows, cfg.rng_bias)
    ys = co.data_path_samples(noise, grid, bg, bw, eps, band)
    xs = np.array([co.x_sample(noise, psi, eps, j) for j in range(1, n_windows + 1)])
    est = co.ergodic_estimate(xs * ys["Y_data"], "ergodic-data")
    return est, oracle


def cmd_recover(cfg, args):
    from .geometry import check_assumptions
    from .recovery import scan_and_recover, write_heatmap_dat, write_scan_csv, write_sigma_csv
    from . import plotting
    metric = cfg.metric()
    rep = check_assumptions(metric, inward_floor=cfg.inward_floor)
    if not rep.ok:
        _write_summary(args.out, "recover", [f"assumption violations: {rep.violations}"])
        print(f"assumption check failed: {rep.violations}", file=sys.stderr)
        return EXIT_ASSUMPTION
    t0 = time.time()
    sigma = scan_and_recover(cfg, log=None if args.quiet else (lambda m: print(m, flush=True)))
    write_sigma_csv(os.path.join(args.out, "sigma_recovered.csv"), sigma)
    write_sigma_csv(os.path.join(args.out, "sigma_truth.csv"), sigma, truth=True)
    arcs, angles = cfg.arcs(metric), cfg.angles()
    for r in sigma.results:
        if r.scan is None:
            continue
        write_scan_csv(os.path.join(args.out, f"beta_scan_{r.pgb_id}.csv"), cfg, metric, r.scan)
        k = int(np.nanargmax(np.nanmax(np.abs(r.scan), axis=(1, 2))))
        if args.dat:
            write_heatmap_dat(os.path.join(args.out, f"beta_heat_{r.pgb_id}.dat"), arcs, angles,
                              np.nan_to_num(np.abs(r.scan[k])))
        if not args.no_figures:
            plotting.beta_heatmap(os.path.join(args.out, f"beta_heat_{r.pgb_id}.png"), r.scan, arcs,
                                  angles, k, title=f"pgb {r.pgb_id}, s = {cfg.s_values()[k]:.3f}")
    if not args.no_figures:
        plotting.sigma_comparison(os.path.join(args.out, "sigma_comparison.png"), sigma)
    rows = sigma.score()
    n_pass = sum(r["pass"] for r in rows)
    need = int(np.ceil(0.75 * len(rows)))
    lines = [f"metric amplitude: {cfg.amplitude}", f"mode: {cfg.mode}", f"eps ladder: {cfg.eps_ladder}"]
    for r, row in zip(sigma.results, rows):
        if r.detected:
            lines.append(f"pgb {r.pgb_id}: detected tau {r.tau:.5f} (truth {r.truth['tau']:.5f}) "
                         f"rel_err {row['tau_rel_err']:.2e} exit_cells {row['exit_cells']:.2f} "
                         f"angle_cells {row['angle_cells']:.2f} rivals {r.rivals} |beta| "
                         f"{abs(r.beta.value):.4g} threshold {r.threshold:.3g} pass {row['pass']}")
        else:
            lines.append(f"pgb {r.pgb_id}: NoDetection ({r.reason})")
    if cfg.mode == "data":
        for r in sigma.detected():
            est, oracle = _data_check(cfg, metric, r, args.data_windows)
            z = abs(est.value - oracle) / est.std_error if est.std_error > 0 else np.inf
            lines.append(f"pgb {r.pgb_id} data check: beta_data {est.value:.4g} +- {est.std_error:.2g} "
                         f"vs lattice quadrature {oracle:.4g} (z {z:.2f}, {est.n_windows} windows)")
    ok = n_pass >= need
    lines += [f"passed: {n_pass}/{len(rows)} (need {need})", f"time: {time.time() - t0:.1f}s"]
    _write_summary(args.out, "recover", lines)
    for line in lines:
        _say(args, line)
    return EXIT_OK if ok else EXIT_THRESHOLD


# -- entry point ------------------------------------------------------------------------

COMMANDS = {
    "check-assumptions": cmd_check_assumptions,
    "direct": cmd_direct,
    "beams": cmd_beams,
    "correlate": cmd_correlate,
    "recover": cmd_recover,
    "lemmas": cmd_lemmas,
}


def build_parser():
    p = _Parser(prog="noisescatter", description="Scattering-relation recovery from boundary noise.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="flat key = value config file")
        s.add_argument("--out", default=None, help="output directory (default: out/<command>)")
        s.add_argument("--quiet", action="store_true")
        s.add_argument("--no-figures", action="store_true")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry")
        if name == "direct":
            s.add_argument("--windows", type=int, default=2)
            s.add_argument("--stride", type=int, default=5, help="time stride of the trace CSVs")
        if name == "correlate":
            s.add_argument("--pgb", type=int, default=0)
            s.add_argument("--eps", type=float, default=None)
        if name == "recover":
            s.add_argument("--dat", action="store_true", help="write gnuplot .dat heatmaps")
            s.add_argument("--data-windows", type=int, default=8)
    return p


def _load(args):
    from .config import parse_config
    cfg = load_config(args.config)
    if args.set:
        base = dump_config(cfg)
        extra = "\n".join(args.set)
        keys = {line.split("=", 1)[0].strip() for line in args.set}
        kept = "\n".join(l for l in base.splitlines() if l.split("=", 1)[0].strip() not in keys)
        cfg = parse_config(kept + "\n" + extra, "<--set>")
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "correlate" and not 0 <= args.pgb < cfg.n_pgb:
        print(f"config error: --pgb {args.pgb} outside 0..{cfg.n_pgb - 1}", file=sys.stderr)
        return EXIT_CONFIG
    args.out = args.out or os.path.join("out", args.command)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config_used.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
