"""Carlini & Wagner L2 attack (untargeted), tanh box reparameterisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from .oracle import AttackRecord, GradientOracle, make_records, margin_fn, runner_up

EDGE_NUDGE = 1e-6


@dataclass
class CwConfig:
    binary_search_steps: int = 9
    inner_steps: int = 5000
    step_size: float = 1.0
    initial_c: float = 100.0
    kappa: float = 0.0
    abort_early: bool = True

    def __post_init__(self):
        if min(self.binary_search_steps, self.inner_steps) < 1 or self.step_size <= 0 or self.initial_c <= 0:
            raise ContractError("C&W search steps, step size and initial constant must be positive")
        if self.kappa < 0:
            raise ContractError("kappa must be >= 0")


def to_box(w: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(w) + 1.0)


def from_box(x: np.ndarray) -> np.ndarray:
    return np.arctanh(2.0 * np.clip(x, EDGE_NUDGE, 1.0 - EDGE_NUDGE) - 1.0)


def _hinge_fn(y: np.ndarray, c: np.ndarray, kappa: float):
    """Graph function ``sum_i c_i * max(Z_y - Z_t, -kappa)`` with ``t`` the
    runner-up class read off the forward pass."""
    def fn(z):
        t = runner_up(z.data, y)
        rows = np.arange(len(y))
        active = (z.data[rows, y] - z.data[rows, t]) > -kappa
        return margin_fn(y, t, c * active)(z)
    return fn


def cw_l2_batch(oracle: GradientOracle, x, y, cfg: CwConfig | None = None, seeds=None) -> list[AttackRecord]:
    """Minimise ``||x~ - x||^2 + c * max(Z_y - max_{s!=y} Z_s, -kappa)`` over
    ``w`` with ``x~ = (tanh(w) + 1) / 2``, bisecting ``c`` per sample.

    Samples are independent; ``seeds`` is accepted for interface symmetry
    (the attack itself is deterministic).
    """
    cfg = cfg or CwConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    axes = tuple(range(1, x.ndim))

    best = [None] * n
    best_l2 = np.full(n, np.inf)
    iters = np.zeros(n, dtype=np.int64)

    pred0 = oracle.predict(x)
    for i in np.flatnonzero(pred0 != y):
        best[i], best_l2[i] = x[i].copy(), 0.0
    active = pred0 == y

    c = np.full(n, cfg.initial_c)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    w0 = from_box(x)

    for _ in range(cfg.binary_search_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xs, ys, cs = x[idx], y[idx], c[idx]
        w = w0[idx].copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(idx.size, dtype=bool)
        prev = np.full(idx.size, np.inf)
        running = np.ones(idx.size, dtype=bool)
        sub = np.arange(idx.size)
        for step in range(1, cfg.inner_steps + 1):
            xa = to_box(w)
            z, _, g_logit = oracle.value_and_grad(_hinge_fn(ys, cs, cfg.kappa), xa)
            diff = z[sub, ys] - z[sub, runner_up(z, ys)]
            dist = ((xa - xs) ** 2).sum(axis=axes)
            loss = dist + cs * np.maximum(diff, -cfg.kappa)

            # keep the closest iterate whose argmax already differs from the label
            adv = z.argmax(axis=1) != ys
            better = adv & (np.sqrt(dist) < best_l2[idx])
            for k in np.flatnonzero(better):
                best[idx[k]] = xa[k].copy()
                best_l2[idx[k]] = np.sqrt(dist[k])
            found |= adv
            iters[idx] += running

            if cfg.abort_early and step % max(cfg.inner_steps // 10, 1) == 0:
                running &= loss <= 0.9999 * prev
                prev = loss.copy()
                if not running.any():
                    break

            g_x = 2.0 * (xa - xs) + g_logit
            g_w = g_x * 0.5 * (1.0 - np.tanh(w) ** 2)
            m = 0.9 * m + 0.1 * g_w
            v = 0.999 * v + 0.001 * g_w * g_w
            mhat = m / (1 - 0.9 ** step)
            vhat = v / (1 - 0.999 ** step)
            upd = cfg.step_size * mhat / (np.sqrt(vhat) + 1e-8)
            upd[~running] = 0.0
            w = w - upd

        # c search: divide/multiply by 10 until bracketed, then bisect
        for k, i in enumerate(idx):
            if found[k]:
                upper[i] = min(upper[i], c[i])
                c[i] = (lower[i] + upper[i]) / 2 if lower[i] > 0 else c[i] / 10
            else:
                lower[i] = max(lower[i], c[i])
                c[i] = (lower[i] + upper[i]) / 2 if np.isfinite(upper[i]) else c[i] * 10

    return make_records(oracle, x, y, best, iters, "cw")


def cw_l2(oracle: GradientOracle, x, y: int, cfg: CwConfig | None = None, seed: int = 0) -> AttackRecord:
    return cw_l2_batch(oracle, np.asarray(x)[None], [y], cfg, [seed])[0]
