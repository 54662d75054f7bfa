"""Matplotlib figures for CLI runs (Agg backend, PNG output)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "font.size": 9,
    "axes.linewidth": 0.8,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def beta_heatmap(path, scan, arcs, angles, s_index, title=""):
    """|beta| over (arc, angle) at one s-slice of the pt grid."""
    mag = np.abs(scan[s_index])
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    im = ax.pcolormesh(arcs, angles, mag.T, shading="nearest", cmap="magma")
    fig.colorbar(im, ax=ax, label=r"$|\beta_\varepsilon|$")
    ax.set_xlabel("boundary arc-length")
    ax.set_ylabel("angle to inward normal")
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def sigma_comparison(path, sigma):
    """Recovered vs true travel time and exit arc-length per pgb."""
    rows = [r for r in sigma.results if r.detected]
    fig, axs = plt.subplots(1, 2, figsize=(7, 3))
    if rows:
        tt = np.array([r.truth["tau"] for r in rows])
        tr = np.array([r.tau for r in rows])
        st = np.array([r.truth["exit_s"] for r in rows])
        sr = np.array([r.exit_arc for r in rows])
        for ax, a, b, lab in ((axs[0], tt, tr, r"$\tau$"), (axs[1], st, sr, "exit arc-length")):
            lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
            ax.plot([lo, hi], [lo, hi], "k-", lw=0.6)
            ax.plot(a, b, "o", ms=4)
            ax.set_xlabel(f"true {lab}")
            ax.set_ylabel(f"recovered {lab}")
    fig.savefig(path)
    plt.close(fig)


def variance_vs_n(path, Ns, variances, slope=None):
    fig, ax = plt.subplots(figsize=(3.6, 3))
    ax.loglog(Ns, variances, "o-", ms=4)
    ax.set_xlabel("N windows")
    ax.set_ylabel(r"Var $\beta_{\varepsilon,N}$")
    if slope is not None:
        ax.set_title(f"slope {slope:.2f}")
    fig.savefig(path)
    plt.close(fig)


def beam_track(path, metric, beams):
    """Central rays of the beams and the domain boundary."""
    fig, ax = plt.subplots(figsize=(3.4, 3.4))
    th = np.linspace(0, 2 * np.pi, 200)
    c = np.asarray(metric.center)
    ax.plot(c[0] + metric.radius * np.cos(th), c[1] + metric.radius * np.sin(th), "k-", lw=0.8)
    for beam in beams:
        g = beam.phase.gamma
        ax.plot(g[:, 0], g[:, 1], "-", lw=0.8)
        ax.plot(*beam.skeleton.anchor.z, "o", ms=3)
    ax.set_aspect("equal")
    fig.savefig(path)
    plt.close(fig)
