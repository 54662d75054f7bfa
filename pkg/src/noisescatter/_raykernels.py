"""Compiled geodesic kernels for the conformal bump metric.

Metric parameters are packed as (A, x0x, x0y, w^2, cx, cy, taper_start, taper_width).
"""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def conformal(px, py, prm):
    A, bx, by, w2, cx, cy, t0, tw = prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6], prm[7]
    if A == 0.0:
        return 1.0, 0.0, 0.0
    rx, ry = px - cx, py - cy
    r = math.sqrt(rx * rx + ry * ry)
    s = (r - t0) / tw
    if s >= 1.0:
        return 1.0, 0.0, 0.0
    if s <= 0.0:
        taper, dtaper = 1.0, 0.0
    else:
        f0 = math.exp(-1.0 / s)
        f1 = math.exp(-1.0 / (1.0 - s))
        taper = 1.0 - f0 / (f0 + f1)
        dtaper = -(f0 * f1 * (1.0 / (s * s) + 1.0 / ((1.0 - s) * (1.0 - s)))) / ((f0 + f1) ** 2) / tw
    dx, dy = px - bx, py - by
    g = math.exp(-(dx * dx + dy * dy) / w2)
    a = 1.0 + A * g * taper
    rinv = 1.0 / r if r > 0 else 0.0
    ax = A * (-2.0 * dx / w2 * g * taper + g * dtaper * rx * rinv)
    ay = A * (-2.0 * dy / w2 * g * taper + g * dtaper * ry * rinv)
    return a, ax, ay


@njit(cache=True)
def _rhs(x, y, qx, qy, prm):
    a, ax, ay = conformal(x, y, prm)
    fac = 0.5 * (qx * qx + qy * qy) / (a * a)
    return qx / a, qy / a, fac * ax, fac * ay


@njit(cache=True)
def rk4(x, y, qx, qy, dt, prm):
    k1 = _rhs(x, y, qx, qy, prm)
    k2 = _rhs(x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1], qx + 0.5 * dt * k1[2], qy + 0.5 * dt * k1[3], prm)
    k3 = _rhs(x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1], qx + 0.5 * dt * k2[2], qy + 0.5 * dt * k2[3], prm)
    k4 = _rhs(x + dt * k3[0], y + dt * k3[1], qx + dt * k3[2], qy + dt * k3[3], prm)
    h = dt / 6.0
    return (x + h * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            y + h * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            qx + h * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
            qy + h * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]))


@njit(cache=True)
def trace(x, y, vx, vy, dt, n, prm):
    out = np.empty((n + 1, 4))
    a, _, _ = conformal(x, y, prm)
    qx, qy = a * vx, a * vy
    out[0, 0], out[0, 1], out[0, 2], out[0, 3] = x, y, qx, qy
    for i in range(n):
        x, y, qx, qy = rk4(x, y, qx, qy, dt, prm)
        out[i + 1, 0], out[i + 1, 1], out[i + 1, 2], out[i + 1, 3] = x, y, qx, qy
    return out


@njit(cache=True)
def exit_rays(X, V, radius, dt, t_max, tol, prm):
    """First crossing of |x - c| = radius, refined by bisection on the last step."""
    m = X.shape[0]
    cx, cy = prm[4], prm[5]
    tau = np.full(m, np.nan)
    out = np.full((m, 4), np.nan)
    trapped = np.zeros(m, dtype=np.bool_)
    n_max = int(math.ceil(t_max / dt))
    for i in range(m):
        x, y = X[i, 0], X[i, 1]
        a, _, _ = conformal(x, y, prm)
        qx, qy = a * V[i, 0], a * V[i, 1]
        done = False
        for k in range(n_max):
            xn, yn, qxn, qyn = rk4(x, y, qx, qy, dt, prm)
            if math.hypot(xn - cx, yn - cy) > radius:
                lo, hi = 0.0, 1.0
                for _ in range(80):
                    mid = 0.5 * (lo + hi)
                    xm, ym, _, _ = rk4(x, y, qx, qy, mid * dt, prm)
                    if math.hypot(xm - cx, ym - cy) > radius:
                        hi = mid
                    else:
                        lo = mid
                    if (hi - lo) * dt < tol:
                        break
                f = 0.5 * (lo + hi)
                xe, ye, qxe, qye = rk4(x, y, qx, qy, f * dt, prm)
                tau[i] = (k + f) * dt
                out[i, 0], out[i, 1], out[i, 2], out[i, 3] = xe, ye, qxe, qye
                done = True
                break
            x, y, qx, qy = xn, yn, qxn, qyn
        if not done:
            trapped[i] = True
    return tau, out, trapped
