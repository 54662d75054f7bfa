"""Compiled inner loops of the finite-difference wave solver."""
import numba as nb


@nb.njit(cache=True)
def leapfrog(u, u_prev, out, inv_a, d_plus, d_minus, dt2, inv_h2):
    """out = (2u - d_minus u_prev + dt^2 lap(u)/a) / d_plus on interior nodes; out may alias u_prev."""
    nx, ny = u.shape
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            lap = (u[i + 1, j] + u[i - 1, j] + u[i, j + 1] + u[i, j - 1] - 4.0 * u[i, j]) * inv_h2
            rhs = lap * inv_a[i, j]
            out[i, j] = (2.0 * u[i, j] - d_minus[i, j] * u_prev[i, j] + dt2 * rhs) / d_plus[i, j]
    for i in range(nx):
        out[i, 0] = 0.0
        out[i, ny - 1] = 0.0
    for j in range(ny):
        out[0, j] = 0.0
        out[nx - 1, j] = 0.0


@nb.njit(cache=True)
def deposit(field, idx, wts, values, coef):
    """field[node] += coef[node] * wts * value for each boundary point (bilinear spreading)."""
    flat = field.ravel()
    cf = coef.ravel()
    for k in range(idx.shape[0]):
        v = values[k]
        for m in range(4):
            node = idx[k, m]
            flat[node] += cf[node] * wts[k, m] * v


@nb.njit(cache=True)
def interpolate(u, idx, wts, out):
    flat = u.ravel()
    for k in range(idx.shape[0]):
        s = 0.0
        for m in range(4):
            s += wts[k, m] * flat[idx[k, m]]
        out[k] = s
