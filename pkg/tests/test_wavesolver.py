import numpy as np
import pytest

from noisescatter.geometry import Metric
from noisescatter.noise import BoundaryLattice, sample
from noisescatter.wavesolver import (ExteriorDirichlet, Grid, Stepper, Unstable, chi_plus, noise_forcing,
                                     read_snapshot, run, snapshot_pairing, solve_forward, write_snapshot,
                                     write_trace_csv)

BUMP = Metric(amplitude=0.2, bump_center=(0.1, 0.05))


@pytest.fixture(scope="module")
def grid():
    return Grid.for_metric(BUMP, h=0.05, T=1.0, box_factor=2.0)


def _smooth_field(grid, c=(0.2, -0.1), w=0.2):
    X, Y = grid.mesh()
    return np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / w ** 2)


def test_cfl_enforced():
    with pytest.raises(ValueError):
        Grid(BUMP, h=0.05, dt=0.03, half_width=2.0, sponge_width=0.5)


def test_for_metric_multiple():
    g = Grid.for_metric(BUMP, h=0.05, T=1.0, box_factor=2.0, multiple=4)
    assert g.lattice(1.0).n_t % 4 == 0
    with pytest.raises(ValueError):
        g.lattice(1.0 + 0.3 * g.dt)


def test_chi_plus():
    assert chi_plus(-1.0) == 0 and chi_plus(0.0) == 0 and chi_plus(1.0) == 1 and chi_plus(3.0) == 1
    t = np.linspace(0, 1, 50)
    assert np.all(np.diff(chi_plus(t)) >= 0)


def test_source_trace_adjoint(grid):
    st = Stepper(grid)
    rng = np.random.default_rng(0)
    F = rng.standard_normal(grid.n_l)
    w = _smooth_field(grid, c=(0.6, 0.5), w=0.5) + 0.1 * rng.standard_normal((grid.n, grid.n))
    assert grid.inner(st.source(F), w) == pytest.approx(np.sum(F * st.trace(w)) * grid.dl, rel=1e-12)


@pytest.mark.parametrize("sponge", [True, False])
def test_discrete_duality(grid, sponge):
    # forward noise solve paired with a free backward solve: exact discrete identity
    lat = grid.lattice(1.0)
    noise = sample(3, lat, 1)
    fwd = solve_forward(noise, grid, sponge=sponge)
    st = Stepper(grid, sponge)
    N = lat.n_t
    w1 = _smooth_field(grid)
    w0 = _smooth_field(grid, c=(0.21, -0.1))
    tr, _ = run(st, N + 1, u0=w1, u1=w0)  # tr[k] = w^{N+1-k}
    lhs = snapshot_pairing(grid, fwd.snapshots[1], (w0, w1), sponge=sponge)
    forcing = noise_forcing(noise)
    rhs = grid.dt * sum(np.sum(forcing(n) * tr[N + 1 - n]) * grid.dl for n in range(N))
    assert lhs == pytest.approx(rhs, rel=1e-9)


def test_lattice_mismatch(grid):
    with pytest.raises(ValueError):
        solve_forward(sample(0, BoundaryLattice(1.0, 7, BUMP.circumference, grid.n_l), 1), grid)


def test_unstable_detected(grid):
    u = np.zeros((grid.n, grid.n))
    u[grid.n // 2, grid.n // 2] = np.nan
    with pytest.raises(Unstable):
        run(Stepper(grid), 3, u0=u, u1=u)


def test_sponge_absorbs(grid):
    # against the reflecting box, the sponge removes most of the kinetic energy by t = 6
    u0 = _smooth_field(grid, c=(0.0, 0.0), w=0.15)
    n = int(6.0 / grid.dt)
    kin = []
    for sponge in (True, False):
        _, snaps = run(Stepper(grid, sponge), n, u0=u0, u1=u0, snapshot_steps=[n], trace=False)
        a, b = snaps[n]
        kin.append(grid.inner(b - a, b - a))
    assert kin[0] < 0.05 * kin[1]


def test_exterior_dirichlet_boundary_value(grid):
    ext = ExteriorDirichlet(grid)
    u = np.zeros((grid.n, grid.n))
    ell = grid.boundary_arclength
    h_row = np.cos(ell)
    ext.impose(u, h_row)
    flat = u.ravel()
    mid = 0.5 * (flat[ext.ghost_flat] + np.sum(flat[ext.img_idx] * ext.img_wts, axis=-1))
    assert np.allclose(mid, ext.boundary_values(h_row), atol=1e-12)
    assert np.all(flat[ext.inside.ravel()][~np.isin(np.flatnonzero(ext.inside.ravel()), ext.ghost_flat)] == 0)


def test_snapshot_roundtrip(tmp_path, grid):
    f = _smooth_field(grid)
    write_snapshot(tmp_path / "s.bin", grid, f, 1.25)
    data, h, t = read_snapshot(tmp_path / "s.bin")
    assert np.array_equal(data, f) and h == grid.h and t == 1.25
    (tmp_path / "bad.bin").write_bytes(b"x" * 40)
    with pytest.raises(ValueError):
        read_snapshot(tmp_path / "bad.bin")


def test_trace_csv(tmp_path):
    tr = np.arange(12.0).reshape(4, 3)
    write_trace_csv(tmp_path / "t.csv", tr, 0.1, np.array([0.0, 1.0, 2.0]), stride=2)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 3 and lines[4].startswith("0.2,0,6")
