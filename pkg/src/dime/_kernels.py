"""Compiled inner loop for the trust-region projection.

The projection objective for a diagonal Gaussian with linear parameters
only depends on per-row weighted sufficient statistics of the sampled
actions, so the inner optimizer runs on arrays of shape ``(S, D)`` instead
of ``(S, N, D)``. ``ascent.py_func`` is the uncompiled reference.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_GRAD_TOL = 1
STATUS_NONFINITE = 2

# Constraint handling modes.
LAGRANGIAN = 0
PENALTY = 1
UNCONSTRAINED = 2


def _ascent(
    phi,  # (S, F)
    c,  # (S,) total coefficient per row
    m1,  # (S, D) sum_j c_sj a_sj
    m2,  # (S, D) sum_j c_sj a_sj^2
    mu_i,  # (S, D) iterate mean per row
    ls_i,  # (S, D) iterate log-std per row
    wm,  # (D, F) mean params, updated in place
    ws,  # (D, F) log-std params, updated in place
    lam,  # (2,) trust-region multipliers, updated in place
    beta_m,
    beta_c,
    lr,
    max_steps,
    grad_tol,
    dual_lr,
    mode,
    penalty,
    use_adam,
):
    s_n, f_n = phi.shape
    d_n = wm.shape[0]
    inv_s = 1.0 / s_n
    gm = np.zeros((d_n, f_n))
    gs = np.zeros((d_n, f_n))
    am = np.zeros((d_n, f_n))
    av = np.zeros((d_n, f_n))
    bm = np.zeros((d_n, f_n))
    bv = np.zeros((d_n, f_n))
    b1, b2, eps = 0.9, 0.999, 1e-8
    status = STATUS_OK
    steps = 0
    for it in range(max_steps):
        gm[:, :] = 0.0
        gs[:, :] = 0.0
        kl_m = 0.0
        kl_c = 0.0
        # First pass: KL values (needed by the penalty weights).
        for s in range(s_n):
            for d in range(d_n):
                mu = 0.0
                ls = 0.0
                for f in range(f_n):
                    mu += wm[d, f] * phi[s, f]
                    ls += ws[d, f] * phi[s, f]
                dl = ls_i[s, d] - ls
                kl_m += 0.5 * (mu - mu_i[s, d]) ** 2 * math.exp(-2.0 * ls)
                kl_c += 0.5 * (math.exp(2.0 * dl) - 1.0 - 2.0 * dl)
        kl_m *= inv_s
        kl_c *= inv_s
        if mode == LAGRANGIAN:
            w_m = lam[0]
            w_c = lam[1]
        elif mode == PENALTY:
            w_m = 2.0 * penalty * max(0.0, kl_m / beta_m - 1.0) / beta_m
            w_c = 2.0 * penalty * max(0.0, kl_c / beta_c - 1.0) / beta_c
        else:
            w_m = 0.0
            w_c = 0.0
        for s in range(s_n):
            for d in range(d_n):
                mu = 0.0
                ls = 0.0
                for f in range(f_n):
                    mu += wm[d, f] * phi[s, f]
                    ls += ws[d, f] * phi[s, f]
                iv = math.exp(-2.0 * ls)
                sq = m2[s, d] - 2.0 * mu * m1[s, d] + c[s] * mu * mu
                g_mu = (m1[s, d] - c[s] * mu) * iv
                g_ls = sq * iv - c[s]
                diff = mu - mu_i[s, d]
                g_mu -= w_m * diff * iv
                g_ls -= w_m * (-diff * diff * iv)
                g_ls -= w_c * (1.0 - math.exp(2.0 * (ls_i[s, d] - ls)))
                for f in range(f_n):
                    gm[d, f] += g_mu * phi[s, f] * inv_s
                    gs[d, f] += g_ls * phi[s, f] * inv_s
        norm = 0.0
        for d in range(d_n):
            for f in range(f_n):
                norm += gm[d, f] ** 2 + gs[d, f] ** 2
        norm = math.sqrt(norm)
        if not math.isfinite(norm):
            status = STATUS_NONFINITE
            break
        if norm < grad_tol:
            status = STATUS_GRAD_TOL
            break
        steps = it + 1
        if use_adam:
            c1 = 1.0 - b1**steps
            c2 = 1.0 - b2**steps
            for d in range(d_n):
                for f in range(f_n):
                    am[d, f] = b1 * am[d, f] + (1.0 - b1) * gm[d, f]
                    av[d, f] = b2 * av[d, f] + (1.0 - b2) * gm[d, f] ** 2
                    bm[d, f] = b1 * bm[d, f] + (1.0 - b1) * gs[d, f]
                    bv[d, f] = b2 * bv[d, f] + (1.0 - b2) * gs[d, f] ** 2
                    wm[d, f] += lr * (am[d, f] / c1) / (math.sqrt(av[d, f] / c2) + eps)
                    ws[d, f] += lr * (bm[d, f] / c1) / (math.sqrt(bv[d, f] / c2) + eps)
        else:
            for d in range(d_n):
                for f in range(f_n):
                    wm[d, f] += lr * gm[d, f]
                    ws[d, f] += lr * gs[d, f]
        if mode == LAGRANGIAN:
            lam[0] = max(0.0, lam[0] + dual_lr * (kl_m / beta_m - 1.0))
            lam[1] = max(0.0, lam[1] + dual_lr * (kl_c / beta_c - 1.0))
    return status, steps


ascent = njit(cache=True)(_ascent)
