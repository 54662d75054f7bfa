import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisescatter.noise import (BoundaryLattice, CovarianceFail, covariance_suite, dump_window_csv,
                                l2_inner, pair, pairing_library, sample, standard_normals)

LAT = BoundaryLattice(1.0, 16, 2 * np.pi, 24)


def test_lattice_geometry():
    assert LAT.dt == pytest.approx(1 / 16) and LAT.dl == pytest.approx(2 * np.pi / 24)
    assert LAT.times(3)[0] == pytest.approx(2.0)
    tt, ll = LAT.mesh(2)
    assert tt.shape == (16, 24) and ll.shape == (16, 24)


def test_deterministic():
    a = sample(7, LAT, 3).window(2)
    b = sample(7, LAT, 3).window(2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(8, LAT, 3).window(2))
    assert not np.array_equal(a, sample(7, LAT, 3).window(1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 40), st.integers(1, 50), st.integers(0, 200), st.integers(1, 60))
def test_counter_access_consistent(seed, window, start, n):
    full = standard_normals(seed, window, start + n)
    assert np.array_equal(standard_normals(seed, window, n, start=start), full[start:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 15), st.integers(0, 15))
def test_rows_and_cells_match_window(seed, i0, di):
    noise = sample(seed, LAT, 2)
    i1 = min(16, i0 + di + 1)
    w = noise.window(2)
    assert np.array_equal(noise.rows(2, i0, i1), w[i0:i1])
    assert noise.cell(2, i0, 5) == w[i0, 5]


def test_window_range():
    noise = sample(0, LAT, 2)
    with pytest.raises(IndexError):
        noise.window(0)
    with pytest.raises(IndexError):
        noise.window(3)
    assert [j for j, _ in noise.windows()] == [1, 2]


def test_moments():
    z = standard_normals(3, 1, 200_000)
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert z.var() == pytest.approx(1.0, abs=0.02)
    w = sample(3, LAT, 1).window(1)
    assert np.std(w) * np.sqrt(LAT.dt * LAT.dl) == pytest.approx(1.0, abs=0.15)


def test_pair_callable_and_dict_agree():
    noise = sample(11, LAT, 2)
    phi = pairing_library(LAT)[0][1]
    arrays = {j: phi(*LAT.mesh(j)) for j in (1, 2)}
    assert pair(noise, phi) == pytest.approx(pair(noise, arrays))


def test_pair_is_linear():
    noise = sample(5, LAT, 2)
    lib = pairing_library(LAT)
    f, g = lib[0][1], lib[2][2]
    lhs = pair(noise, lambda t, l: 2 * f(t, l) - 3 * g(t, l))
    assert lhs == pytest.approx(2 * pair(noise, f) - 3 * pair(noise, g))


def test_library_inner_products():
    vals = {name: l2_inner(LAT, phi, psi, (1, 2)) for name, phi, psi in pairing_library(LAT)}
    assert vals["identical"] > 0
    assert vals["half_overlap"] > 0
    for k in ("disjoint", "orthogonal", "cross_window"):
        assert abs(vals[k]) < 1e-12


def test_covariance_suite_small():
    rows = covariance_suite(LAT, n_seeds=1500, z_max=4.5)
    assert len(rows) == 5


def test_covariance_suite_detects_bias():
    with pytest.raises(CovarianceFail) as info:
        covariance_suite(LAT, n_seeds=1500, bias=0.1, z_max=3.0)
    assert len(info.value.rows) == 5


def test_dump_csv(tmp_path):
    noise = sample(1, LAT, 1)
    p = tmp_path / "w.csv"
    dump_window_csv(p, noise, 1)
    rows = list(csv.DictReader(open(p)))
    assert len(rows) == LAT.cells
    assert float(rows[1]["value"]) == noise.window(1)[0, 1]
