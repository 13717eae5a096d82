"""Compiled inner loops for the optimizer.

These mirror ``model.probs_and_jacobian`` and ``classical.Objective`` on the
inspection grid only.  The numpy versions remain the reference; tests pin the
two against each other.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .model import DistributionKind

WEIBULL = 0
GOMPERTZ = 1

PROB_FLOOR = 1e-300

# status codes returned by cd_fit
CONVERGED = 0
MAX_ITERS = 1
BAD_START = 2
DIVERGED = 3
BAD_GRADIENT = 4


@njit(cache=True)
def _q(kind, t, g):
    if kind == WEIBULL:
        return t ** g
    return math.expm1(g * t)


@njit(cache=True)
def _dq(kind, t, g):
    if kind == WEIBULL:
        return g * t ** (g - 1.0)
    return g * math.exp(g * t)


@njit(cache=True)
def _qg(kind, t, g):
    if kind == WEIBULL:
        return t ** g * math.log(t)
    return t * math.exp(g * t)


@njit(cache=True)
def _dqg(kind, t, g):
    if kind == WEIBULL:
        return t ** (g - 1.0) * (1.0 + g * math.log(t))
    return math.exp(g * t) * (1.0 + g * t)


@njit(cache=True)
def grid_probs(kind, x, cps, grid, lvl, delta, theta, want_jac, p, jac):
    """Fill ``p`` (cells + survival) and optionally ``jac``; returns False on overflow."""
    k = x.shape[0]
    return _grid_probs(kind, x, cps, grid, lvl, delta, theta, want_jac, p, jac,
                       np.empty(k), np.empty(k), np.empty((k, k + 2)),
                       np.empty(k + 2), np.empty(k + 2))


@njit(cache=True)
def _grid_probs(kind, x, cps, grid, lvl, delta, theta, want_jac, p, jac,
                lam, off, doff, dh, dh_prev):
    k = x.shape[0]
    npar = k + 2
    m = grid.shape[0]
    for i in range(k):
        v = theta[0] + theta[1] * x[i]
        if v > 700.0:
            return False
        lam[i] = math.exp(v)
    off[0] = 0.0
    for j in range(npar):
        doff[0, j] = 0.0
        dh_prev[j] = 0.0
    for i in range(1, k):
        a = cps[i - 1]
        b = a + delta
        g0 = theta[2 + i - 1]
        g1 = theta[2 + i]
        qa = _q(kind, a, g0)
        qb = _q(kind, b, g1)
        qpa = _dq(kind, a, g0)
        qpb = _dq(kind, b, g1)
        off[i] = off[i - 1] + lam[i - 1] * qa - lam[i] * qb + 0.5 * delta * (
            lam[i - 1] * qpa + lam[i] * qpb)
        if want_jac:
            prev = lam[i - 1] * (qa + 0.5 * delta * qpa)
            nxt = lam[i] * (0.5 * delta * qpb - qb)
            for j in range(npar):
                doff[i, j] = doff[i - 1, j]
            doff[i, 0] += prev + nxt
            doff[i, 1] += x[i - 1] * prev + x[i] * nxt
            doff[i, 2 + i - 1] += lam[i - 1] * (_qg(kind, a, g0) + 0.5 * delta * _dqg(kind, a, g0))
            doff[i, 2 + i] += lam[i] * (0.5 * delta * _dqg(kind, b, g1) - _qg(kind, b, g1))
    h_prev = 0.0
    s_prev = 1.0
    for r in range(m):
        i = lvl[r]
        t = grid[r]
        lq = lam[i] * _q(kind, t, theta[2 + i])
        h = lq + off[i]
        if not math.isfinite(h):
            return False
        s = math.exp(-h)
        p[r] = s_prev * -math.expm1(-(h - h_prev))
        if want_jac:
            for j in range(npar):
                dh[j] = doff[i, j]
            dh[0] += lq
            dh[1] += x[i] * lq
            dh[2 + i] += lam[i] * _qg(kind, t, theta[2 + i])
            for j in range(npar):
                jac[r, j] = s * dh[j] - s_prev * dh_prev[j]
                dh_prev[j] = dh[j]
        h_prev = h
        s_prev = s
    p[m] = s_prev
    if want_jac:
        for j in range(npar):
            jac[m, j] = -s_prev * dh_prev[j]
    return True


@njit(cache=True)
def objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha, want_grad, p, jac, grad):
    """NLL (``alpha == 0``) or DPD objective; returns (value, floor_hits)."""
    k = x.shape[0]
    return _objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha, want_grad,
                      p, jac, grad, np.empty(k), np.empty(k), np.empty((k, k + 2)),
                      np.empty(k + 2), np.empty(k + 2))


@njit(cache=True)
def _objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha, want_grad, p, jac, grad,
               lam, off, doff, dh, dh_prev):
    ok = _grid_probs(kind, x, cps, grid, lvl, delta, theta, want_grad, p, jac,
                     lam, off, doff, dh, dh_prev)
    if not ok:
        return math.inf, 0
    ncell = p.shape[0]
    n = 0.0
    for r in range(ncell):
        n += counts[r]
    hits = 0
    for r in range(ncell):
        if p[r] != p[r]:
            return math.inf, 0
        if p[r] < PROB_FLOOR:
            p[r] = PROB_FLOOR
            hits += 1
        elif p[r] > 1.0:
            p[r] = 1.0
            hits += 1
    val = 0.0
    if want_grad:
        for j in range(grad.shape[0]):
            grad[j] = 0.0
    for r in range(ncell):
        if alpha == 0.0:
            if counts[r] > 0:
                val -= counts[r] * math.log(p[r])
            w = -counts[r] / p[r]
        else:
            f = counts[r] / n
            pa = p[r] ** alpha
            val += pa * p[r] - (1.0 + 1.0 / alpha) * f * pa + f ** (alpha + 1.0) / alpha
            w = (alpha + 1.0) * (pa - f * pa / p[r])
        if want_grad:
            for j in range(grad.shape[0]):
                grad[j] += w * jac[r, j]
    return val, hits


@njit(cache=True)
def cd_fit(kind, x, cps, grid, lvl, delta, counts, alpha, theta0,
           lr, threshold, max_iters, max_halvings, divergence_sweeps):
    """Cyclic coordinate descent with step halving; see ``classical.coordinate_descent``.

    Returns (theta, value, sweeps, status, floor_hits).
    """
    npar = theta0.shape[0]
    ncell = grid.shape[0] + 1
    p = np.empty(ncell)
    jac = np.empty((ncell, npar))
    grad = np.empty(npar)
    k = x.shape[0]
    lam = np.empty(k)
    off = np.empty(k)
    doff = np.empty((k, npar))
    dh = np.empty(npar)
    dh_prev = np.empty(npar)
    theta = theta0.copy()
    f, hits = _objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha, False, p, jac,
                         grad, lam, off, doff, dh, dh_prev)
    if not math.isfinite(f):
        return theta, f, 0, BAD_START, hits
    start = np.empty(npar)
    rising = 0
    for sweep in range(1, max_iters + 1):
        for j in range(npar):
            start[j] = theta[j]
        f_start = f
        for j in range(npar):
            _, h = _objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha, True,
                              p, jac, grad, lam, off, doff, dh, dh_prev)
            hits += h
            gj = grad[j]
            if not math.isfinite(gj):
                return theta, f, sweep, BAD_GRADIENT, hits
            step = lr
            old = theta[j]
            f_cand = math.inf
            for halving in range(max_halvings + 1):
                cand = old - step * gj
                if j >= 2 and cand <= 0.0:
                    cand = old / 2.0
                theta[j] = cand
                f_cand, h = _objective(kind, x, cps, grid, lvl, delta, theta, counts, alpha,
                                       False, p, jac, grad, lam, off, doff, dh, dh_prev)
                hits += h
                if f_cand <= f or halving == max_halvings:
                    break
                theta[j] = old
                step /= 2.0
            if not math.isfinite(f_cand):
                theta[j] = old
                continue
            f = f_cand
        if f > f_start:
            rising += 1
        else:
            rising = 0
        if rising >= divergence_sweeps:
            return theta, f, sweep, DIVERGED, hits
        moved = 0.0
        for j in range(npar):
            d = abs(theta[j] - start[j])
            if d > moved:
                moved = d
        if moved < threshold:
            return theta, f, sweep, CONVERGED, hits
    return theta, f, max_iters, MAX_ITERS, hits


def kernel_args(plan, dist) -> tuple:
    """Positional plan arguments shared by the compiled routines."""
    kind = WEIBULL if DistributionKind.parse(dist) is DistributionKind.WEIBULL else GOMPERTZ
    return (kind, plan.x, plan.change_points, plan.grid, plan.cell_level.astype(np.int64),
            plan.delta)


def probs(args: tuple, theta, want_jac: bool = True):
    """Cell probabilities and Jacobian, or ``(None, None)`` when they overflow."""
    theta = np.asarray(theta, dtype=float)
    ncell = args[3].shape[0] + 1
    p = np.empty(ncell)
    jac = np.empty((ncell, theta.shape[0]))
    if not grid_probs(*args, theta, want_jac, p, jac):
        return None, None
    return p, (jac if want_jac else None)
