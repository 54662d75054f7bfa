"""Smooth cutoff profiles shared by the beam, test-function and solver code."""
import numpy as np


def smoothstep(s):
    """Quintic smoothstep s^3 (10 - 15 s + 6 s^2), clamped to [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def plateau(r, inner, outer):
    """1 for r <= inner, 0 for r >= outer, quintic transition in between."""
    if outer <= inner:
        raise ValueError("outer radius must exceed inner radius")
    return 1.0 - smoothstep((np.asarray(r, dtype=float) - inner) / (outer - inner))


def smooth_step(s, xp=np):
    """C-infinity step e^{-1/s} / (e^{-1/s} + e^{-1/(1-s)}); exactly 0 for s <= 0 and 1 for s >= 1.

    Used for the metric taper: the beam jets need derivatives of a up to third
    order, and RK4 keeps its order only if those are smooth as well.
    """
    s = xp.clip(s, 0.0, 1.0)
    inside = (s > 0.0) & (s < 1.0)
    ss = xp.where(inside, s, 0.5)  # keeps exp(-1/s) and its derivatives finite off the band
    f0 = xp.exp(-1.0 / ss)
    f1 = xp.exp(-1.0 / (1.0 - ss))
    return xp.where(inside, f0 / (f0 + f1), xp.where(s >= 1.0, 1.0, 0.0))


def smooth_step_d1(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0.0) & (s < 1.0)
    ss = np.where(inside, s, 0.5)
    f0 = np.exp(-1.0 / ss)
    f1 = np.exp(-1.0 / (1.0 - ss))
    d = (f0 / ss ** 2 * f1 + f0 * f1 / (1.0 - ss) ** 2) / (f0 + f1) ** 2
    return np.where(inside, d, 0.0)
