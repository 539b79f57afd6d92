"""Derivative-free simplex minimisation (reflect / expand / contract / shrink)."""

from __future__ import annotations

from typing import Callable

import numpy as np


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0,
    max_iters: int = 1000,
    tolerance: float = 1e-8,
    initial_step=None,
    reflect: float = 1.0,
    expand: float = 2.0,
    contract: float = 0.5,
    shrink: float = 0.5,
) -> np.ndarray:
    """Return the best vertex after the simplex diameter drops below
    ``tolerance`` or ``max_iters`` iterations.

    The starting simplex is ``x0`` plus one step along each axis: 5% of the
    coordinate, or 0.00025 for zero coordinates, unless ``initial_step``
    (scalar or per-axis) is given. ``f`` may return ``inf`` to mark
    infeasible points.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    n = x0.size
    if initial_step is None:
        steps = np.where(x0 != 0, 0.05 * x0, 0.00025)
    else:
        steps = np.broadcast_to(np.asarray(initial_step, dtype=np.float64), (n,))
    simplex = np.vstack([x0] + [x0 + steps[i] * np.eye(n)[i] for i in range(n)])
    values = np.array([f(v) for v in simplex])

    for _ in range(max_iters):
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        if np.max(np.abs(simplex[1:] - simplex[0])) < tolerance:
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + reflect * (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + expand * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + contract * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + contract * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + shrink * (simplex[1:] - simplex[0])
        values[1:] = [f(v) for v in simplex[1:]]

    best = int(np.argmin(values))
    return simplex[best].copy()


def nelder_mead_batch(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0,
    max_iters: int = 1000,
    tolerance: float = 1e-8,
    initial_step=None,
    reflect: float = 1.0,
    expand: float = 2.0,
    contract: float = 0.5,
    shrink: float = 0.5,
) -> np.ndarray:
    """Independent simplex searches for each row of ``x0`` (shape (S, n)).

    ``f(points, rows)`` evaluates ``points[k]`` under problem ``rows[k]`` and
    returns a vector. Every problem follows exactly the moves
    :func:`nelder_mead` would make; the batch only shares the Python loop.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    S, n = x0.shape
    if initial_step is None:
        steps = np.where(x0 != 0, 0.05 * x0, 0.00025)
    else:
        steps = np.broadcast_to(np.asarray(initial_step, dtype=np.float64), (S, n))
    simplex = np.repeat(x0[:, None, :], n + 1, axis=1)
    for i in range(n):
        simplex[:, i + 1, i] += steps[:, i]
    all_rows = np.arange(S)
    values = np.stack([f(simplex[:, v], all_rows) for v in range(n + 1)], axis=1)
    active = np.ones(S, dtype=bool)

    for _ in range(max_iters):
        order = np.argsort(values, axis=1, kind="stable")
        simplex = np.take_along_axis(simplex, order[:, :, None], axis=1)
        values = np.take_along_axis(values, order, axis=1)
        active &= np.abs(simplex[:, 1:] - simplex[:, :1]).max(axis=(1, 2)) >= tolerance
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        sx, sv = simplex[rows], values[rows]
        centroid = sx[:, :-1].mean(axis=1)
        worst = sx[:, -1]
        xr = centroid + reflect * (centroid - worst)
        fr = f(xr, rows)
        new_x, new_v = worst.copy(), sv[:, -1].copy()
        settled = np.zeros(rows.size, dtype=bool)

        exp = fr < sv[:, 0]
        if exp.any():
            xe = centroid[exp] + expand * (xr[exp] - centroid[exp])
            fe = f(xe, rows[exp])
            use_e = fe < fr[exp]
            new_x[exp] = np.where(use_e[:, None], xe, xr[exp])
            new_v[exp] = np.where(use_e, fe, fr[exp])
            settled |= exp

        acc = ~settled & (fr < sv[:, -2])
        new_x[acc], new_v[acc] = xr[acc], fr[acc]
        settled |= acc

        outside = ~settled & (fr < sv[:, -1])
        inside = ~settled & ~outside
        to_shrink = np.zeros(rows.size, dtype=bool)
        if outside.any():
            xc = centroid[outside] + contract * (xr[outside] - centroid[outside])
            fc = f(xc, rows[outside])
            ok = fc <= fr[outside]
            idx = np.flatnonzero(outside)
            new_x[idx[ok]], new_v[idx[ok]] = xc[ok], fc[ok]
            to_shrink[idx[~ok]] = True
        if inside.any():
            xc = centroid[inside] + contract * (worst[inside] - centroid[inside])
            fc = f(xc, rows[inside])
            ok = fc < sv[inside, -1]
            idx = np.flatnonzero(inside)
            new_x[idx[ok]], new_v[idx[ok]] = xc[ok], fc[ok]
            to_shrink[idx[~ok]] = True

        keep = ~to_shrink
        sx[keep, -1], sv[keep, -1] = new_x[keep], new_v[keep]
        if to_shrink.any():
            k = np.flatnonzero(to_shrink)
            sx[k, 1:] = sx[k, :1] + shrink * (sx[k, 1:] - sx[k, :1])
            for v in range(1, n + 1):
                sv[k, v] = f(sx[k, v], rows[k])
        simplex[rows], values[rows] = sx, sv

    best = values.argmin(axis=1)
    return simplex[all_rows, best].copy()
