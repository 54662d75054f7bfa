import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisescatter.geometry import Metric
from noisescatter.recovery import pt_from_coords
from noisescatter.testfn import MultiCross, boundary_mass, make_test, second_crossing

EUCLID = Metric()
BUMP = Metric(amplitude=0.2, bump_center=(0.1, 0.05))


def test_peak_value_and_decay():
    tf = make_test(EUCLID, pt_from_coords(EUCLID, 3.0, 0.5, 0.2))
    y = np.asarray(tf.y)
    assert abs(tf.evaluate(tf.s, y, 0.05)) == pytest.approx(1.0)
    off = y + 0.1 * np.asarray(tf.eta)[::-1] * np.array([1, -1])
    assert abs(tf.evaluate(tf.s, off, 0.05)) == pytest.approx(np.exp(-0.01 / 0.05), rel=1e-9)


def test_conjugation():
    tf = make_test(BUMP, pt_from_coords(BUMP, 3.0, 1.0, -0.3))
    x = np.asarray(tf.y) + np.array([0.02, -0.01])
    a = tf.evaluate(3.05, x, 0.1)
    b = tf.evaluate(3.05, x, 0.1, conjugate=False)
    assert abs(a) == pytest.approx(abs(b)) and np.angle(a) == pytest.approx(-np.angle(b))


def test_phase_gradient_is_q():
    tf = make_test(BUMP, pt_from_coords(BUMP, 3.0, 2.0, 0.4))
    y, h = np.asarray(tf.y), 1e-6
    grad = [(tf.theta(tf.s, y + h * e) - tf.theta(tf.s, y - h * e)).real / (2 * h) for e in np.eye(2)]
    assert np.allclose(grad, tf.q, atol=1e-8)
    assert np.allclose(tf.q, BUMP.a(y) * np.asarray(tf.eta))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-1.2, 1.2), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_cutoff_support(arc, angle, dt, dx):
    tf = make_test(EUCLID, pt_from_coords(EUCLID, 3.0, arc, angle))
    x = np.asarray(tf.y) + np.array([dx, 0.0])
    v = tf.cutoff(tf.s + dt, x)
    assert 0.0 <= v <= 1.0
    if abs(dt) >= tf.r_t or abs(dx) >= tf.r_x:
        assert v == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-1.4, 1.4))
def test_single_crossing_in_support(arc, angle):
    tf = make_test(EUCLID, pt_from_coords(EUCLID, 3.0, arc, angle))
    assert second_crossing(EUCLID, tf.y, tf.eta) > tf.r_t


def test_second_crossing_is_chord():
    pt = pt_from_coords(EUCLID, 3.0, 0.0, 0.5)
    assert second_crossing(EUCLID, pt[1], pt[2]) == pytest.approx(2 * np.cos(0.5))


def test_grazing_shrinks_support():
    tf = make_test(EUCLID, pt_from_coords(EUCLID, 3.0, 0.0, 1.5), inward_floor=0.05)
    assert tf.r_t < 0.3


def test_rejects_bad_points():
    s, y, eta = pt_from_coords(EUCLID, 3.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        make_test(EUCLID, (s, 0.9 * y, eta))
    with pytest.raises(ValueError):
        make_test(EUCLID, (s, y, 2 * eta))
    with pytest.raises(ValueError):
        make_test(EUCLID, (s, y, -eta))
    with pytest.raises(ValueError):
        make_test(EUCLID, (0.5, y, eta), T=5.0)
    assert issubclass(MultiCross, ValueError)


@pytest.mark.parametrize("eps", [0.05, 0.02, 0.01])
def test_boundary_mass_concentrates(eps):
    tf = make_test(BUMP, pt_from_coords(BUMP, 3.0, 1.0, 0.3))
    total, frac = boundary_mass(BUMP, tf, eps)
    assert total > 0 and frac > 0.99
