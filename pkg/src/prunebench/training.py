"""ADAM with pruning masks, early stopping on validation loss, and LR decay on plateau."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ContractError
from .model import MaskedNetwork, forward
from .tensor import Tensor, gradient, log_softmax, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    max_epochs: int = 150
    patience_epochs: float = 5
    lr_decay_factor: float = 0.3
    lr_patience: float = 12
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience_epochs < 1 or self.lr_patience < 1:
            raise ContractError("patience values must be >= 1")
        if not 0 < self.lr_decay_factor < 1:
            raise ContractError("lr_decay_factor must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("max_epochs and batch_size must be positive")


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              masks: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One bias-corrected ADAM update; returns new parameter arrays.

    Where a mask is 0 both the gradient and the update are zeroed, so a pruned
    weight that is 0 stays exactly 0.
    """
    if len(params) != len(grads) or (masks is not None and len(masks) != len(params)):
        raise ContractError("params, grads and masks must align")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1 ** state.t
    corr2 = 1 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ContractError(f"shape mismatch in parameter {i}: {p.shape} vs grad {g.shape}")
        if masks is not None:
            g = g * masks[i]
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = state.lr * (state.m[i] / corr1) / (np.sqrt(state.v[i] / corr2) + state.eps)
        if masks is not None:
            update = update * masks[i]
        out.append(p - update)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class EarlyStopping:
    """Tracks the best validation loss, LR plateaus, and when to stop."""

    patience: float
    lr_patience: float
    best: float = math.inf
    best_epoch: int = 0
    wait: int = 0
    lr_wait: int = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch = val_loss, epoch
            self.wait = self.lr_wait = 0
            return True
        self.wait += 1
        self.lr_wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience

    def take_lr_decay(self) -> bool:
        if self.lr_wait >= self.lr_patience:
            self.lr_wait = 0
            return True
        return False


def evaluate(net: MaskedNetwork, ds: Dataset, batch_size: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset."""
    total, correct = 0.0, 0
    for i in range(0, len(ds), batch_size):
        z = forward(net, Tensor(ds.images[i:i + batch_size])).data
        y = ds.labels[i:i + batch_size]
        total -= log_softmax(z)[np.arange(len(y)), y].sum()
        correct += int((z.argmax(axis=1) == y).sum())
    return float(total / len(ds)), correct / len(ds)


def _batch_grads(net: MaskedNetwork, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    params = net.parameters()
    leaves = [Tensor(p.effective, requires_grad=True) for p in params]
    loss = softmax_cross_entropy(forward(net, Tensor(x), leaves), y)
    grads = gradient(loss, leaves)
    return float(loss.data), [grads[leaf].data * p.mask for leaf, p in zip(leaves, params)]


def _snapshot(net: MaskedNetwork) -> list[np.ndarray]:
    return [p.values.copy() for p in net.parameters()]


def _restore(net: MaskedNetwork, values: list[np.ndarray]) -> None:
    for p, v in zip(net.parameters(), values):
        p.values = v.copy()


def train_to_convergence(net: MaskedNetwork, train: Dataset, val: Dataset, cfg: TrainConfig | None = None,
                         seed: int = 0) -> tuple[MaskedNetwork, list[EpochRecord]]:
    """Train in place until validation loss stops improving; restores the best weights."""
    cfg = cfg or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise ContractError("training and validation sets must be non-empty")
    rng = np.random.default_rng(seed)
    params = net.parameters()
    state = AdamState(cfg.lr0, cfg.beta1, cfg.beta2, cfg.eps)
    stopper = EarlyStopping(cfg.patience_epochs, cfg.lr_patience)
    history: list[EpochRecord] = []

    val_loss, _ = evaluate(net, val)
    stopper.update(0, val_loss)
    best = _snapshot(net)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _batch_grads(net, train.images[idx], train.labels[idx])
            new = adam_step(state, [p.values for p in params], grads, [p.mask for p in params])
            for p, v in zip(params, new):
                p.values = v
            losses.append(loss * len(idx))
        val_loss, val_acc = evaluate(net, val)
        history.append(EpochRecord(epoch, sum(losses) / len(train), val_loss, val_acc, state.lr))
        log.info("epoch %d train %.4f val %.4f acc %.4f lr %.2g", epoch, history[-1].train_loss,
                 val_loss, val_acc, state.lr)
        if stopper.update(epoch, val_loss):
            best = _snapshot(net)
        if stopper.should_stop:
            break
        if stopper.take_lr_decay():
            state.lr *= cfg.lr_decay_factor
    _restore(net, best)
    return net, history


def write_history_csv(history: list[EpochRecord], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr)])
