"""Brendel & Bethge L0 attack.

Starting from an adversarial point, walk along the decision boundary towards
the clean input. Each step linearises the boundary (normal ``b`` and target
change ``c`` of the adversarial criterion) and solves

    min_d ||x0 - x - d||_0   s.t.   b.d = c,  ||d||_2^2 <= r,  0 <= x + d <= 1

through the dual of its Lagrangian, minimised with Nelder-Mead over
``(lam, mu)``. All per-pixel work is vectorised; only the outer loop over
samples is Python.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from .nelder_mead import nelder_mead_batch
from .oracle import AttackRecord, GradientOracle, make_records, margin_fn, runner_up

SNAP = 1e-10


@dataclass
class BbConfig:
    binary_search_steps: int = 30
    inner_steps: int = 500
    initial_radius: float = 1e7
    radius_decays: int = 30
    decay_factor: float = 0.5
    overshoot: float = 1.1
    momentum: float = 0.8
    nm_max_iters: int = 1000
    nm_tolerance: float = 1e-8

    def __post_init__(self):
        ints = (self.binary_search_steps, self.inner_steps, self.radius_decays, self.nm_max_iters)
        if min(ints) < 1 or self.initial_radius <= 0 or not 0 < self.decay_factor <= 1:
            raise ContractError("B&B steps, radius and decay must be positive (decay in (0, 1])")
        if not 1 <= self.overshoot < 2 or not 0 <= self.momentum < 1:
            raise ContractError("overshoot must lie in [1, 2) and momentum in [0, 1)")


# -- per-sample subproblem -------------------------------------------------------

def _max_reachable(x, b, c):
    """Largest ``|b.d|`` in the direction of ``c`` inside the box, and the squared norm of that step."""
    up = (b > 0) == (c > 0)
    d = np.where(up, 1.0 - x, -x)
    d[b == 0] = 0.0
    return float(b @ d), float(d @ d)


def _min_norm_to_boundary(x, b, c, max_iters=200):
    """Squared norm of the smallest box-feasible step with ``b.d = c`` (bisection on the multiplier)."""
    bb = float(b @ b)
    if c == 0 or bb == 0:
        return 0.0
    lo_box, hi_box = -x, 1.0 - x
    lam_lo, lam_hi = 2 * c / bb, np.sign(c) * np.inf
    lam = lam_lo
    norm = 0.0
    for _ in range(max_iters):
        d = np.clip(lam * b / 2, lo_box, hi_box)
        reached = float(b @ d)
        norm = float(d @ d)
        if abs(reached) < abs(c):
            if np.isinf(lam_hi):
                lam *= 2
            else:
                lam_lo = lam
                lam = (lam_hi - lam_lo) / 2 + lam_lo
        else:
            lam_hi = lam
            lam = (lam_hi - lam_lo) / 2 + lam_lo
        if 0.999 * abs(c) - 1e-10 < abs(reached) < 1.001 * abs(c) + 1e-10:
            break
    return norm


def _step_towards_boundary(x, b, c, r):
    """Maximise ``sign(c) b.d`` subject to ``||d||^2 <= r`` and the box.

    The optimum is ``d(t) = clip(sign(c) b t)``; ``||d(t)||^2`` is piecewise
    quadratic in ``t`` so the radius crossing is found exactly.
    """
    a = np.sign(c) * b
    bound = np.where(a > 0, 1.0 - x, -x)
    live = a != 0
    d = np.zeros_like(x)
    if not live.any():
        return d
    a_l, bound_l = a[live], bound[live]
    bp = bound_l / a_l
    order = np.argsort(bp, kind="stable")
    bp_s, a2_s, c2_s = bp[order], a_l[order] ** 2, bound_l[order] ** 2
    clipped = np.concatenate([[0.0], np.cumsum(c2_s)[:-1]])
    free = a2_s.sum() - np.concatenate([[0.0], np.cumsum(a2_s)[:-1]])
    at_bp = clipped + bp_s ** 2 * free
    hit = np.flatnonzero(at_bp >= r)
    if hit.size == 0:
        d[live] = bound_l
        return d
    k = hit[0]
    t = np.sqrt(max(r - clipped[k], 0.0) / free[k])
    d[live] = np.clip(a_l * t, np.minimum(bound_l, 0), np.maximum(bound_l, 0))
    return d


def _greedy(x0, x, b, c):
    """Best L0 step ignoring the trust region: restore every pixel to ``x0``,
    then move the most effective pixels to the box edge until ``b.d = c``."""
    delta = x0 - x
    rem = c - float(b @ delta)
    up = (b > 0) == (rem > 0)
    total = np.where(up, 1.0 - x0, -x0)
    total[b == 0] = 0.0
    total_b = total * b
    order = np.argsort(-np.abs(total_b), kind="stable")
    reach = np.cumsum(np.abs(total_b[order]))
    k = int(np.searchsorted(reach, abs(rem)))
    full = order[:k]
    delta[full] += total[full]
    if k < order.size:
        j = order[k]
        delta[j] += (rem - float(total_b[full].sum())) / (b[j] + 1e-20)
    return delta


def _dual_pieces(lam, mu, x0, x, b):
    """Per-pixel cost of keeping ``d = x0 - x`` versus moving the pixel, and the move."""
    dx = x0 - x
    keep = lam * b * dx + mu * dx * dx
    if mu > 0:
        move = np.clip(-lam * b / (2 * mu), -x, 1.0 - x)
        move_cost = 1 + lam * b * move + mu * move * move
    else:
        lo, hi = -x, 1.0 - x
        cost_lo, cost_hi = 1 + lam * b * lo, 1 + lam * b * hi
        use_lo = cost_lo < cost_hi
        move = np.where(use_lo, lo, hi)
        move_cost = np.where(use_lo, cost_lo, cost_hi)
    return dx, keep, move, move_cost


def _dual_objective(x0, x, b, c, r):
    """Negated Lagrange dual ``-g(lam, mu)`` for a batch of subproblems.

    Inputs are stacked per problem (rows); the returned ``f(params, rows)``
    evaluates ``params[k] = (lam, mu)`` under problem ``rows[k]``.
    """
    x0, x, b = np.atleast_2d(x0), np.atleast_2d(x), np.atleast_2d(b)
    c, r = np.atleast_1d(c), np.atleast_1d(r)
    dx = x0 - x
    dx2 = dx * dx
    lo, hi = -x, 1.0 - x
    blo, bhi, bdx = b * lo, b * hi, b * dx

    def f(params, rows):
        params = np.atleast_2d(params)
        lam, mu = params[:, :1], params[:, 1:]
        # rows are sorted and unique, so a full-length index is the identity
        pick = (lambda a: a) if len(rows) == len(b) else (lambda a: a[rows])
        bk = pick(b)
        keep = lam * pick(bdx) + mu * pick(dx2)
        safe_mu = np.where(mu > 0, mu, 1.0)
        move = np.minimum(np.maximum((-lam / (2 * safe_mu)) * bk, pick(lo)), pick(hi))
        move_cost = 1.0 + move * (lam * bk + mu * move)
        if not (mu > 0).all():
            edge = 1.0 + np.minimum(lam * pick(blo), lam * pick(bhi))
            move_cost = np.where(mu > 0, move_cost, edge)
        g = np.minimum(keep, move_cost, out=keep).sum(axis=1) - lam[:, 0] * c[rows] - mu[:, 0] * r[rows]
        return np.where(mu[:, 0] < 0, np.inf, -g)

    return f


def _primal_from_dual(lam, mu, x0, x, b, c, r, touchup=True):
    dx, keep, move, move_cost = _dual_pieces(lam, mu, x0, x, b)
    moved = ~(keep <= move_cost)
    delta = np.where(moved, move, dx)
    if not touchup:
        return delta
    # fix b.d = c by adjusting the single pixel that keeps L0 lowest, then the norm
    dc = c - float(b @ delta)
    norm = float(delta @ delta)
    changed = np.abs(delta - dx) > SNAP
    ok = b != 0
    new = delta.copy()
    new[ok] = delta[ok] + dc / b[ok]
    new_norm = norm - delta ** 2 + new ** 2
    feasible = ok & (x + new <= 1.0) & (x + new >= 0.0) & (new_norm <= r)
    if not feasible.any():
        return None
    dist = changed.sum() - changed + (np.abs(new - dx) > SNAP)
    idx = np.flatnonzero(feasible)
    best = idx[np.lexsort((idx, new_norm[idx], dist[idx]))[0]]
    delta[best] = new[best]
    return delta


def _final_delta(lam, mu, x0, x, b, c, r):
    delta = _primal_from_dual(lam, mu, x0, x, b, c, r)
    if delta is not None:
        return delta
    h = 1e-5
    for dl, dm in ((h, 0), (0, h), (-h, 0), (0, -h), (h, h), (-h, -h), (h, -h), (-h, h)):
        delta = _primal_from_dual(lam + dl, mu + dm, x0, x, b, c, r)
        if delta is not None:
            return delta
    return _primal_from_dual(lam, mu, x0, x, b, c, r, touchup=False)


def solve_steps(x0, x, b, c, r, cfg: BbConfig) -> np.ndarray:
    """Trust-region steps for a stack of flat problems; ``r`` bounds ``||d||^2``.

    Dual searches of all problems that need one run as a single batch.
    """
    deltas = np.empty_like(x)
    dual = []
    for i in range(len(x)):
        ci, ri = float(c[i]), float(r[i])
        cmax, cmax_norm = _max_reachable(x[i], b[i], ci)
        reachable = abs(cmax) >= abs(ci) and (cmax_norm <= ri or _min_norm_to_boundary(x[i], b[i], ci) <= ri)
        if not reachable:
            deltas[i] = _step_towards_boundary(x[i], b[i], ci, ri)
            continue
        deltas[i] = _greedy(x0[i], x[i], b[i], ci)
        if float(deltas[i] @ deltas[i]) > ri:
            dual.append(i)
    if dual:
        k = np.asarray(dual)
        f = _dual_objective(x0[k], x[k], b[k], c[k], r[k])
        params = nelder_mead_batch(f, np.zeros((k.size, 2)), max_iters=cfg.nm_max_iters, tolerance=cfg.nm_tolerance)
        for i, (lam, mu) in zip(k, params):
            deltas[i] = _final_delta(lam, mu, x0[i], x[i], b[i], float(c[i]), float(r[i]))
    return deltas


def solve_step(x0, x, b, c, r, cfg: BbConfig) -> np.ndarray:
    """One trust-region step ``d`` for flat vectors; ``r`` bounds ``||d||^2``."""
    return solve_steps(x0[None], x[None], b[None], np.array([c]), np.array([r]), cfg)[0]


# -- attack loop -----------------------------------------------------------------

def _is_adv(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return z.argmax(axis=1) != y


def bb_l0_batch(oracle: GradientOracle, x, y, starts, cfg: BbConfig | None = None, seeds=None) -> list[AttackRecord]:
    """Run the attack for a batch; ``starts[i]`` must already be misclassified.

    The attack is deterministic; ``seeds`` only mirrors the other attacks.
    """
    cfg = cfg or BbConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.float64)
    if starts.shape != x.shape:
        raise ContractError(f"starting points {starts.shape} do not match inputs {x.shape}")
    n = len(x)
    if not _is_adv(oracle.logits(starts), y).all():
        raise ContractError("B&B needs adversarial starting points")
    shape = x.shape
    x0 = x.reshape(n, -1)

    # line search between the clean input and the start
    lower, upper = np.zeros(n), np.ones(n)
    s_flat = starts.reshape(n, -1)
    for _ in range(cfg.binary_search_steps):
        eps = (lower + upper) / 2
        mid = (1 - eps[:, None]) * x0 + eps[:, None] * s_flat
        adv = _is_adv(oracle.logits(mid.reshape(shape)), y)
        lower = np.where(adv, lower, eps)
        upper = np.where(adv, eps, upper)
    cur = (1 - upper[:, None]) * x0 + upper[:, None] * s_flat

    best = s_flat.copy()
    best_l0 = np.count_nonzero(best - x0, axis=1)
    r = np.full(n, cfg.initial_radius)
    interval = max(1, cfg.inner_steps // cfg.radius_decays)
    decays = 0
    boundary = None
    rows = np.arange(n)

    for step in range(1, cfg.inner_steps + 1):
        fn = lambda z: margin_fn(y, runner_up(z.data, y))(z)
        z, _, grad = oracle.value_and_grad(fn, cur.reshape(shape))
        diff = z[rows, y] - z[rows, runner_up(z, y)]
        adv = _is_adv(z, y)
        l0 = np.count_nonzero(cur - x0, axis=1)
        closer = adv & (l0 < best_l0)
        best[closer] = cur[closer]
        best_l0[closer] = l0[closer]

        g = grad.reshape(n, -1)
        boundary = g if boundary is None else (1 - cfg.momentum) * g + cfg.momentum * boundary
        if (step + 1) % interval == 0 and decays < cfg.radius_decays:
            r *= cfg.decay_factor
            decays += 1

        # overshoot past the boundary when outside, stop short when inside
        target = np.where(diff > 0, -cfg.overshoot * diff, -(2 - cfg.overshoot) * diff)
        nxt = np.clip(cur + solve_steps(x0, cur, boundary, target, r, cfg), 0.0, 1.0)
        snap = np.abs(nxt - x0) <= SNAP
        nxt[snap] = x0[snap]
        cur = nxt

    z = oracle.logits(cur.reshape(shape))
    closer = _is_adv(z, y) & (np.count_nonzero(cur - x0, axis=1) < best_l0)
    best[closer] = cur[closer]
    return make_records(oracle, x, y, list(best.reshape(shape)), cfg.inner_steps, "bb")


def bb_l0(oracle: GradientOracle, x, y: int, start, cfg: BbConfig | None = None, seed: int = 0) -> AttackRecord:
    return bb_l0_batch(oracle, np.asarray(x)[None], [y], np.asarray(start)[None], cfg, [seed])[0]
