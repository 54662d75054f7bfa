import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import standard_anchor
from noisescatter import correlator as co
from noisescatter.beams import build_beam
from noisescatter.noise import BoundaryLattice, sample
from noisescatter.recovery import pt_from_coords
from noisescatter.testfn import make_test
from noisescatter.wavesolver import chi_plus

LAT = BoundaryLattice(1.0, 12, 2 * np.pi, 16)


def _synthetic(rng, J=3):
    psi = rng.standard_normal((LAT.n_t, LAT.n_l)) + 1j * rng.standard_normal((LAT.n_t, LAT.n_l))
    psi[:3] = 0
    wins = [rng.standard_normal((LAT.n_t, LAT.n_l)) * (0.5 ** k) for k in range(J)]
    return psi, co.TraceWindows(LAT, [w.astype(complex) for w in wins])


def test_ergodic_series_matches_direct_samples():
    rng = np.random.default_rng(1)
    psi, tw = _synthetic(rng)
    eps = 0.1
    factory = lambda seed, n: sample(seed, LAT, n)
    X, Y = co.ergodic_series(factory, [4, 9], psi, tw, eps, N=5)
    for si, seed in enumerate([4, 9]):
        noise = factory(seed, 5)
        for j in range(1, 6):
            assert X[si, j - 1] == pytest.approx(co.x_sample(noise, psi, eps, j), rel=1e-12)
            assert Y[si, j - 1] == pytest.approx(co.y_sample_direct(noise, tw, eps, j), rel=1e-12)


def test_expectation_of_product_is_pairing():
    # E[X^1 Y^1] = eps^{-1} sum psi chi_+ w dt dl
    rng = np.random.default_rng(2)
    psi, tw = _synthetic(rng, J=1)
    eps = 0.2
    X, Y = co.ergodic_series(lambda s, n: sample(s, LAT, n), range(4000), psi, tw, eps, N=1)
    prod = (X * Y)[:, 0]
    exact = np.sum(psi * chi_plus(LAT.times(1))[:, None] * tw.windows[0]) * LAT.dt * LAT.dl / eps
    se = np.std(prod) / np.sqrt(len(prod))
    assert abs(prod.mean() - exact) < 4.5 * se


def test_jackknife_equals_sample_error():
    z = np.random.default_rng(3).standard_normal(50) * (1 + 1j)
    est = co.ergodic_estimate(z)
    assert est.std_error == pytest.approx(np.sqrt(np.sum(np.abs(z - z.mean()) ** 2) / (50 * 49)))
    assert co.ergodic_estimate(z[:1]).std_error == 0.0


def test_variance_decays_like_inverse_n():
    P = np.random.default_rng(4).standard_normal((400, 256))
    Ns = [4, 16, 64, 256]
    assert co.loglog_slope(Ns, co.variance_vs_N(P, Ns)) == pytest.approx(-1.0, abs=0.15)


def test_fourth_moment_identity_monte_carlo():
    rng = np.random.default_rng(5)
    A = (rng.normal(size=(2, 4)) + 1j * rng.normal(size=(2, 4))) / 2
    mc, se, exact, _ = co.fourth_moment_identity(A, 40000, rng)
    assert abs(mc - exact) < 5 * se


def test_isserlis_against_monte_carlo():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(4, 3)) + 1j * rng.normal(size=(4, 3))
    Z = A @ rng.normal(size=(3, 400000))
    v = Z[0] * Z[1] * Z[2] * Z[3]
    assert abs(v.mean() - co.isserlis4(A)) < 5 * np.std(v) / np.sqrt(v.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 3000), st.floats(0.3, 3.0))
def test_simple_inequality_bound(N, p):
    _, ok = co.simple_ineq_ratio(N, p)
    assert ok


def test_lemma_suite_passes():
    rep = co.gaussian_lemma_suite(n_seeds=4000, n_structures=20)
    assert rep["b_worst_ratio"] <= 1.0


def test_lemma_suite_flags_persistent_correlation():
    rng = np.random.default_rng(7)
    P = rng.standard_normal((64, 1)) + 0.1 * rng.standard_normal((64, 128))
    with pytest.raises(co.LemmaFail) as info:
        co.gaussian_lemma_suite(n_seeds=2000, n_structures=5, products=P)
    assert info.value.report["c"]["exponent"] > -0.35


def test_tail_helpers_on_exact_sequence():
    T = 2.0
    K = 40
    s_lo, s_hi = np.arange(1, K + 1) * T, np.arange(2, K + 2) * T
    norms = 3.0 * (1 / s_lo - 1 / s_hi)  # integral of 3/s^2 over each window
    tails, rest = co.tail_from_windows(norms, T)
    assert tails[0] == pytest.approx(3.0 / T, rel=1e-2)
    J = np.arange(1, 11)
    C, dev, slope = co.inverse_power_band(J, 1.0 / J)
    assert C == pytest.approx(1.0) and dev == pytest.approx(1.0) and slope == pytest.approx(-1.0)


def test_beta_quadrature_routes_agree(euclid):
    # formal-beam quadrature over the patch vs lattice sum over a full window
    eps = 0.08
    beam = build_beam(euclid, standard_anchor(T=6.5))
    sk = beam.skeleton
    y = beam._splines["gamma"](sk.entry_time)
    p = beam._splines["p"](sk.entry_time)
    pt = pt_from_coords(euclid, sk.entry_time, float(euclid.arclength(y)),
                        float(euclid.angle_to_inward_normal(y, p)))
    tf = make_test(euclid, pt, T=beam.T)
    lat = BoundaryLattice(beam.T, 325, euclid.circumference, 320)
    tw = co.trace_windows_from_beam(beam, lat, eps)
    b_lat = co.beta_quadrature_lattice(euclid, lat, tf, tw.windows[0], eps)
    b_quad = co.beta_quadrature(beam, tf, eps)
    assert abs(b_quad) > 0.1
    assert abs(b_lat - b_quad) < 1e-3 * abs(b_quad)
    off = make_test(euclid, (pt[0] - 1.0, pt[1], pt[2]), T=beam.T)
    assert abs(co.beta_quadrature(beam, off, eps)) < 1e-3 * abs(b_quad)
