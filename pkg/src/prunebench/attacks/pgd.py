"""Projected gradient descent under an L-infinity budget."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..tensor import softmax_cross_entropy
from .oracle import AttackRecord, GradientOracle, make_records


@dataclass
class PgdConfig:
    eps: float
    steps: int = 40
    rel_step: float = 0.1 / 3
    random_start: bool = True

    def __post_init__(self):
        if self.eps < 0 or self.steps < 1:
            raise ContractError("PGD needs eps >= 0 and steps >= 1")


def ball_bounds(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Box-clipped L-inf ball around ``x`` whose corners satisfy
    ``|corner - x| <= eps`` exactly in floating point (``x - eps`` can round
    one ulp outside)."""
    lo, hi = x - eps, x + eps
    while np.any(bad := x - lo > eps):
        lo[bad] = np.nextafter(lo[bad], x[bad])
    while np.any(bad := hi - x > eps):
        hi[bad] = np.nextafter(hi[bad], x[bad])
    return np.maximum(lo, 0.0), np.minimum(hi, 1.0)


def pgd_linf_batch(oracle: GradientOracle, x, y, cfg: PgdConfig, seeds) -> list[AttackRecord]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eps = cfg.eps
    lo, hi = ball_bounds(x, eps)
    if cfg.random_start and eps > 0:
        noise = np.stack([np.random.default_rng(int(s)).uniform(-eps, eps, size=x.shape[1:]) for s in seeds])
        x_adv = np.clip(x + noise, lo, hi)
    else:
        x_adv = x.copy()
    step = cfg.rel_step * eps
    if eps > 0:
        loss = lambda z: softmax_cross_entropy(z, y, reduction="sum")
        for _ in range(cfg.steps):
            g = oracle.input_gradient(loss, x_adv)
            x_adv = np.clip(x_adv + step * np.sign(g), lo, hi)
    return make_records(oracle, x, y, list(x_adv), cfg.steps, "pgd")


def pgd_linf(oracle: GradientOracle, x, y: int, cfg: PgdConfig, seed: int = 0) -> AttackRecord:
    return pgd_linf_batch(oracle, np.asarray(x)[None], [y], cfg, [seed])[0]
