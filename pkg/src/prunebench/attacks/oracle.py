"""White-box access to a classifier: logits and input gradients.

Attacks only talk to a :class:`GradientOracle`, so the same code runs
against a pruned CNN5 or a hand-built linear model in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..model import MaskedNetwork, forward
from ..tensor import Tensor, affine, gradient, pick

LogitFn = Callable[[Tensor], Tensor]


class GradientOracle:
    def __init__(self, forward_fn: Callable[[Tensor], Tensor], class_count: int, fingerprint: str = "",
                 batch_size: int = 256):
        self._forward = forward_fn
        self.class_count = class_count
        self.fingerprint = fingerprint
        self.batch_size = batch_size

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        bs = self.batch_size
        if len(x) == 0:
            return np.zeros((0, self.class_count))
        return np.concatenate([self._forward(Tensor(x[i:i + bs])).data for i in range(0, len(x), bs)])

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def value_and_grad(self, fn: LogitFn, x) -> tuple[np.ndarray, float, np.ndarray]:
        """Logits at ``x``, the value of ``fn(logits)``, and its gradient w.r.t. ``x``."""
        leaf = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        z = self._forward(leaf)
        out = fn(z)
        g = gradient(out, [leaf])[leaf].data
        return z.data, float(out.data), g

    def input_gradient(self, fn: LogitFn, x) -> np.ndarray:
        return self.value_and_grad(fn, x)[2]


def network_oracle(net: MaskedNetwork, batch_size: int = 256) -> GradientOracle:
    weights = [Tensor(p.effective) for p in net.parameters()]
    return GradientOracle(lambda x: forward(net, x, weights), net.class_count, net.fingerprint(), batch_size)


def linear_oracle(W, b) -> GradientOracle:
    """Logits ``x @ W + b`` for flat inputs ``x`` of shape (n, d)."""
    Wt, bt = Tensor(W), Tensor(b)
    return GradientOracle(lambda x: affine(x, Wt, bt), Wt.shape[1])


def runner_up(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Best class other than ``y``; lowest index among ties."""
    masked = np.array(z, dtype=np.float64, copy=True)
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def margin_fn(y: np.ndarray, t: np.ndarray, weights: np.ndarray | None = None) -> LogitFn:
    """``sum_i w_i * (Z[i, y_i] - Z[i, t_i])`` as a graph function of the logits."""
    def fn(z: Tensor) -> Tensor:
        diff = pick(z, y) - pick(z, t)
        if weights is not None:
            diff = diff * weights
        return diff.sum()
    return fn


def adv_criterion(oracle: GradientOracle, x, y) -> np.ndarray:
    """``Z_y - max_{t != y} Z_t`` per sample; negative exactly when misclassified
    (up to ties, which the lowest-index rule resolves)."""
    y = np.asarray(y)
    z = oracle.logits(x)
    rows = np.arange(len(y))
    return z[rows, y] - z[rows, runner_up(z, y)]


def boundary_normal(oracle: GradientOracle, x, y) -> np.ndarray:
    """Gradient of :func:`adv_criterion` with respect to the input, with the
    runner-up class frozen at ``x``."""
    y = np.asarray(y)
    t = runner_up(oracle.logits(x), y)
    return oracle.input_gradient(margin_fn(y, t), x)


@dataclass
class AttackRecord:
    x: np.ndarray
    y: int
    x_adv: np.ndarray | None
    success: bool
    l0: float
    l2: float
    linf: float
    iterations: int = 0
    attack: str = ""

    def norm(self, kind: str) -> float:
        return {"L0": self.l0, "L2": self.l2, "Linf": self.linf}[kind]


def perturbation_norms(x: np.ndarray, x_adv: np.ndarray) -> tuple[float, float, float]:
    d = (np.asarray(x_adv) - np.asarray(x)).ravel()
    return float(np.count_nonzero(d)), float(np.sqrt(d @ d)), float(np.abs(d).max(initial=0.0))


def make_record(oracle: GradientOracle, x, y: int, x_adv, iterations: int, attack: str) -> AttackRecord:
    """Build a record, re-deriving success and norms from the stored tensors.

    ``x_adv=None`` means the attack found nothing; norms are then infinite.
    """
    if x_adv is None:
        return AttackRecord(x, int(y), None, False, np.inf, np.inf, np.inf, iterations, attack)
    success = bool(oracle.predict(x_adv[None])[0] != y)
    l0, l2, linf = perturbation_norms(x, x_adv)
    return AttackRecord(x, int(y), x_adv, success, l0, l2, linf, iterations, attack)


def make_records(oracle: GradientOracle, x: np.ndarray, y: np.ndarray, x_adv: list, iterations, attack: str
                 ) -> list[AttackRecord]:
    """Batched :func:`make_record`: one prediction pass over all candidates."""
    iterations = np.broadcast_to(np.asarray(iterations), (len(x),))
    found = [i for i, a in enumerate(x_adv) if a is not None]
    pred = {}
    if found:
        pred = dict(zip(found, oracle.predict(np.stack([x_adv[i] for i in found]))))
    out = []
    for i in range(len(x)):
        if x_adv[i] is None:
            out.append(AttackRecord(x[i], int(y[i]), None, False, np.inf, np.inf, np.inf, int(iterations[i]), attack))
            continue
        l0, l2, linf = perturbation_norms(x[i], x_adv[i])
        out.append(AttackRecord(x[i], int(y[i]), x_adv[i], bool(pred[i] != y[i]), l0, l2, linf,
                                int(iterations[i]), attack))
    return out
