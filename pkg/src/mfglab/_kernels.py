"""Compiled time-stepping loops for quadratic Hamiltonians p^2/2 + b(x) p + c(x).

These are the performance-critical inner loops of the forward-backward
solver.  They mirror the generic numpy path in solver.py operation for
operation; fastmath stays off so results agree bit-for-bit between the
deterministic solver and the noise-tree solver, which share these kernels.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def hjb_backward_quad(f_path, b_c, c_c, dx, dt, u_end):
    """Backward sweep of du/dt = u + H(Du, x) - F with Godunov fluxes.

    f_path: (L+1, n) coupling values; returns (u, max_speed) where u has the
    same shape and max_speed is the largest |D_pH| seen at selected gradients.
    """
    steps = f_path.shape[0] - 1
    n = f_path.shape[1]
    u = np.empty_like(f_path)
    for i in range(n):
        u[steps, i] = u_end[i]
    max_speed = 0.0
    for k in range(steps - 1, -1, -1):
        row = u[k + 1]
        for i in range(n):
            pl = (row[i] - row[(i - 1) % n]) / dx
            pr = (row[(i + 1) % n] - row[i]) / dx
            b = b_c[i]
            if pl <= pr:
                p_hat = -b
                if p_hat < pl:
                    p_hat = pl
                elif p_hat > pr:
                    p_hat = pr
            else:
                hl = 0.5 * pl * pl + b * pl
                hr = 0.5 * pr * pr + b * pr
                p_hat = pl if hl >= hr else pr
            h_hat = 0.5 * p_hat * p_hat + b * p_hat + c_c[i]
            speed = abs(p_hat + b)
            if speed > max_speed:
                max_speed = speed
            u[k, i] = row[i] - dt * (row[i] + h_hat - f_path[k + 1, i])
        if max_speed * dt / dx > 1.0:
            return u, max_speed  # abort before the instability corrupts the sweep
    return u, max_speed


@njit(cache=True)
def kernel_path(kernel, masses_path):
    """Row-wise kernel @ masses with an explicit accumulation loop.

    Each time slice is reduced in the same compiled order independent of how
    the path is segmented, so the flat solver and the noise-tree solver get
    bitwise-identical coupling values (BLAS batching does not guarantee
    that)."""
    n_slices, n = masses_path.shape
    out = np.empty((n_slices, n))
    for k in range(n_slices):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += kernel[i, j] * masses_path[k, j]
            out[k, i] = acc
    return out


@njit(cache=True)
def transport_forward_quad(u_seg, b_if, dx, dt, mass_start):
    """Donor-cell transport of dm/dt = div(m D_pH(Du, x)) along a segment.

    Velocity at interface i+1/2 is -(g_i + b(x_{i+1/2})) with g the interface
    gradient of u.  Returns (masses, max_cfl); each step rescales by the total
    mass to cancel ~1e-16 flux rounding.
    """
    steps = u_seg.shape[0] - 1
    n = u_seg.shape[1]
    out = np.empty_like(u_seg)
    mu = np.empty(n)
    flux = np.empty(n)
    for i in range(n):
        mu[i] = mass_start[i]
        out[0, i] = mass_start[i]
    max_cfl = 0.0
    for k in range(steps):
        row = u_seg[k]
        for i in range(n):
            g = (row[(i + 1) % n] - row[i]) / dx
            vel = -(g + b_if[i])
            cfl = abs(vel) * dt / dx
            if cfl > max_cfl:
                max_cfl = cfl
            if vel >= 0.0:
                flux[i] = vel * mu[i]
            else:
                flux[i] = vel * mu[(i + 1) % n]
        total = 0.0
        for i in range(n):
            mu[i] = mu[i] - (dt / dx) * (flux[i] - flux[(i - 1) % n])
            if mu[i] < 1e-30:  # flush: denormals stall the FPU on collapsed paths
                mu[i] = 0.0
        for i in range(n):
            total += mu[i]
        for i in range(n):
            mu[i] = mu[i] / total
            out[k + 1, i] = mu[i]
    return out, max_cfl
