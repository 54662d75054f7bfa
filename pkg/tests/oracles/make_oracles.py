"""Regenerate frozen.json: independent oracles for the [DERIVED] checks.

Geodesics: scipy DOP853 on the Hamiltonian system (x' = p/a, p' = |p|^2 grad a / (2a^2))
with a boundary event, no shared code with the package integrators.
Run: python3 tests/oracles/make_oracles.py
"""
import json
import os

import numpy as np
from scipy.integrate import solve_ivp

A, X0, W2 = 0.2, np.array([0.1, 0.05]), 0.35 ** 2
R_TAPER0, TAPER_W = 0.5, 0.3


def step(s):
    # C-infinity transition, written out independently of the package
    if s <= 0:
        return 0.0
    if s >= 1:
        return 1.0
    f0, f1 = np.exp(-1 / s), np.exp(-1 / (1 - s))
    return f0 / (f0 + f1)


def dstep(s, h=1e-6):
    # derivative by complex-free central difference on the closed form, refined by Richardson
    d1 = (step(s + h) - step(s - h)) / (2 * h)
    d2 = (step(s + h / 2) - step(s - h / 2)) / h
    return (4 * d2 - d1) / 3


def a_and_grad(x, amp=A):
    d = x - X0
    g = np.exp(-d @ d / W2)
    r = np.linalg.norm(x)
    s = (r - R_TAPER0) / TAPER_W
    tap = 1 - step(s)
    dtap = -dstep(s) / TAPER_W
    rhat = x / max(r, 1e-300)
    a = 1 + amp * g * tap
    grad = amp * (-2 * d / W2 * g * tap + g * dtap * rhat)
    return a, grad


def rhs(t, y, amp):
    x, p = y[:2], y[2:]
    a, da = a_and_grad(x, amp)
    return np.concatenate([p / a, 0.5 * (p @ p) / a ** 2 * da])


def exit_event(t, y, amp):
    return np.linalg.norm(y[:2]) - 1.0


exit_event.terminal = True
exit_event.direction = 1


def scatter(s, angle, amp=A):
    x = np.array([np.cos(s), np.sin(s)])
    nu = -x
    c, sn = np.cos(angle), np.sin(angle)
    d = np.array([c * nu[0] - sn * nu[1], sn * nu[0] + c * nu[1]])
    a, _ = a_and_grad(x, amp)
    p = a * d / np.sqrt(a)  # covector of the unit vector d / sqrt(a)
    # start a hair inside so the event does not fire at t = 0
    sol = solve_ivp(rhs, (0, 20), np.concatenate([x, p]), method="DOP853", rtol=1e-12,
                    atol=1e-13, events=exit_event, args=(amp,), first_step=1e-6)
    te = sol.t_events[0]
    te = te[te > 1e-3][0]
    ye = sol.y_events[0][list(sol.t_events[0]).index(te)]
    xe, pe = ye[:2], ye[2:]
    ae, _ = a_and_grad(xe, amp)
    ve = pe / ae
    ex_s = float(np.mod(np.arctan2(xe[1], xe[0]), 2 * np.pi))
    nu_e = -xe / np.linalg.norm(xe)
    back = -ve
    ex_ang = float(np.arctan2(nu_e[0] * back[1] - nu_e[1] * back[0], nu_e @ back))
    return float(te), ex_s, ex_ang


def main():
    out = {"metric": {"amplitude": A, "bump_center": X0.tolist(), "width": 0.35}, "scattering": []}
    for k in range(16):
        s = 2 * np.pi * k / 16 + 0.1
        angle = 1.2 * np.sin(1.7 * k + 0.3)
        tau, es, ea = scatter(s, angle)
        out["scattering"].append({"entry_s": s, "entry_angle": angle, "tau": tau, "exit_s": es,
                                  "exit_angle": ea})
    path = os.path.join(os.path.dirname(__file__), "frozen.json")
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)
    print("wrote", path)


if __name__ == "__main__":
    main()
