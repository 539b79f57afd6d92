"""Nine pruning methods (structure x criterion x scope) and the halving schedule.

Units are the atoms a method removes: a single weight, one kh x kw kernel
slice ``K[:, :, i, o]``, or one whole filter ``K[:, :, :, o]``. Structured
methods only see convolutional layers; dense layers keep all-one masks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ScheduleExhaustedError
from .model import MaskedNetwork, sparsity

log = logging.getLogger(__name__)

STRUCTURES = ("unstructured", "kernel", "filter")
CRITERIA = ("magnitude", "random")
SCOPES = ("local", "global")


@dataclass(frozen=True)
class PruningMethod:
    structure: str
    criterion: str
    scope: str

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ContractError(f"unknown structure {self.structure!r}")
        if self.criterion not in CRITERIA:
            raise ContractError(f"unknown criterion {self.criterion!r}")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown scope {self.scope!r}")
        if self.criterion == "random" and self.scope == "global":
            raise ContractError("global random pruning is not supported; use local random")

    @property
    def name(self) -> str:
        return f"{self.structure}-{self.criterion}-{self.scope}"

    @classmethod
    def parse(cls, text: str) -> PruningMethod:
        parts = text.strip().split("-")
        if len(parts) != 3:
            raise ContractError(f"pruning method must look like 'structure-criterion-scope', got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return self.name


ALL_METHODS = tuple(
    PruningMethod(s, c, sc)
    for s in STRUCTURES
    for c, sc in (("magnitude", "local"), ("magnitude", "global"), ("random", "local"))
)


@dataclass(frozen=True)
class PruneUnit:
    layer: int
    unit: int
    score: float


def _layers_in_scope(net: MaskedNetwork, structure: str) -> list[int]:
    if structure == "unstructured":
        return net.prunable_layers()
    return [i for i in net.prunable_layers() if net.layers[i].kind == "conv"]


def unit_view(arr: np.ndarray, structure: str) -> np.ndarray:
    """Reshape a weight array to (elements_per_unit, units); a view when ``arr`` is contiguous."""
    if structure == "unstructured":
        return arr.reshape(1, -1)
    if arr.ndim != 4:
        raise ContractError(f"{structure} pruning needs a 4-d conv kernel, got shape {arr.shape}")
    kh, kw, ci, co = arr.shape
    if structure == "kernel":
        return arr.reshape(kh * kw, ci * co)
    return arr.reshape(kh * kw * ci, co)


def _layer_scores(net: MaskedNetwork, method: PruningMethod, seed: int) -> dict[int, np.ndarray]:
    rng = np.random.default_rng(seed)
    scores = {}
    for i in _layers_in_scope(net, method.structure):
        p = net.layers[i].weight
        alive = unit_view(p.mask, method.structure).any(axis=0)
        if method.criterion == "magnitude":
            s = np.sqrt((unit_view(p.effective, method.structure) ** 2).sum(axis=0))
        else:
            s = rng.uniform(size=alive.shape)
        scores[i] = np.where(alive, s, -np.inf)
    return scores


def score_units(net: MaskedNetwork, method: PruningMethod, seed: int = 0) -> list[PruneUnit]:
    """Scores of all still-alive units, in (layer, unit) order."""
    out = []
    for layer, s in _layer_scores(net, method, seed).items():
        for u in np.flatnonzero(np.isfinite(s)):
            out.append(PruneUnit(layer, int(u), float(s[u])))
    return out


def _remove(net: MaskedNetwork, structure: str, layer: int, units: np.ndarray) -> None:
    p = net.layers[layer].weight
    p.mask = np.ascontiguousarray(p.mask)
    unit_view(p.mask, structure)[:, units] = 0.0
    p.values = p.values * p.mask


def prune_step(net: MaskedNetwork, method: PruningMethod, fraction: float = 0.5, seed: int = 0,
               protect_last: bool = True) -> MaskedNetwork:
    """Remove the lowest-scoring units in place.

    Local scope removes ``floor(fraction * alive)`` units per layer. Global
    scope walks one pooled ranking and stops once the next unit would
    overshoot ``floor(fraction * alive weights)`` by more than half its size.

    Ties are broken by (layer index, unit index). With ``protect_last`` a
    layer never loses its last alive unit; without it, global ranking may
    empty a layer.
    """
    if not 0 < fraction < 1:
        raise ContractError("fraction must lie in (0, 1)")
    scores = _layer_scores(net, method, seed)
    alive = {i: int(np.isfinite(s).sum()) for i, s in scores.items()}

    if method.scope == "local":
        if sum(alive.values()) < 2:
            raise ScheduleExhaustedError(f"{method}: fewer than two alive units left")
        if all(a < 2 for a in alive.values()):
            log.warning("%s: every layer is down to its last unit; nothing removed", method)
        for i, s in scores.items():
            k = min(math.floor(fraction * alive[i]), alive[i] - 1)
            if k <= 0:
                continue
            live = np.flatnonzero(np.isfinite(s))
            order = live[np.argsort(s[live], kind="stable")]
            _remove(net, method.structure, i, order[:k])
        return net

    total = sum(alive.values())
    if total < 2:
        raise ScheduleExhaustedError(f"{method}: fewer than two alive units left")
    # Budget in weights, so global filter pruning with mixed unit sizes still
    # halves the weight count. A unit is taken while that keeps the removed
    # count within half a unit of the budget; for single weights this is the
    # plain floor, and over repeated halvings the drift stays below one unit.
    size = {i: unit_view(net.layers[i].weight.mask, method.structure).shape[0] for i in scores}
    budget = math.floor(fraction * sum(alive[i] * size[i] for i in scores))
    layer_ids = np.concatenate([np.full(len(s), i) for i, s in scores.items()])
    unit_ids = np.concatenate([np.arange(len(s)) for s in scores.values()])
    flat = np.concatenate(list(scores.values()))
    live = np.isfinite(flat)
    layer_ids, unit_ids, flat = layer_ids[live], unit_ids[live], flat[live]
    order = np.lexsort((unit_ids, layer_ids, flat))
    left = dict(alive)
    chosen: dict[int, list[int]] = {i: [] for i in scores}
    removed = 0
    for j in order:
        layer = int(layer_ids[j])
        if protect_last and left[layer] <= 1:
            continue
        if 2 * removed + size[layer] > 2 * budget:
            break
        chosen[layer].append(int(unit_ids[j]))
        left[layer] -= 1
        removed += size[layer]
    for layer, units in chosen.items():
        if units:
            _remove(net, method.structure, layer, np.asarray(units))
    return net


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def advance(
    net: MaskedNetwork,
    method: PruningMethod,
    from_rate: int,
    to_rate: int,
    trainer: Callable[[MaskedNetwork, int], MaskedNetwork] | None = None,
    seed: int = 0,
) -> MaskedNetwork:
    """Halve and fine-tune from ``from_rate`` up to ``to_rate`` (both powers of two).

    Step seeds depend only on the halving index, so resuming from a saved
    intermediate rate reproduces an uninterrupted schedule.
    """
    validate_rates([to_rate] if from_rate == 1 else [from_rate, to_rate])
    current, step = from_rate, from_rate.bit_length() - 1
    while current < to_rate:
        step += 1
        current *= 2
        prune_step(net, method, 0.5, seed=_step_seed(seed, step))
        if trainer is not None:
            net = trainer(net, current)
    return net


def iterative_prune(
    net: MaskedNetwork,
    method: PruningMethod,
    rates=(2, 4, 8, 16, 32, 64),
    trainer: Callable[[MaskedNetwork, int], MaskedNetwork] | None = None,
    seed: int = 0,
    on_checkpoint: Callable[[int, MaskedNetwork], None] | None = None,
) -> dict[int, MaskedNetwork]:
    """Halve, fine-tune, repeat; returns a copy of the network at every listed rate.

    ``trainer(net, rate)`` fine-tunes in place with the surviving weights
    retained. ``rates`` must be strictly increasing powers of two above 1.
    """
    rates = [int(r) for r in rates]
    validate_rates(rates)
    out = {}
    current = 1
    for rate in rates:
        net = advance(net, method, current, rate, trainer, seed)
        current = rate
        out[rate] = net.copy()
        if on_checkpoint is not None:
            on_checkpoint(rate, out[rate])
    return out


def validate_rates(rates) -> None:
    prev = 1
    for r in rates:
        if r <= prev or r & (r - 1):
            raise ContractError(f"rates must be strictly increasing powers of two above 1, got {list(rates)}")
        prev = r


def scope_sparsity(net: MaskedNetwork, structure: str):
    """Sparsity restricted to the layers a structure can prune."""
    layers = set(_layers_in_scope(net, structure))
    stat = sparsity(net)
    rows = [row for i, row in zip(net.prunable_layers(), stat.per_layer) if i in layers]
    return sum(t for t, _ in rows), sum(n for _, n in rows)


def mask_summary(net: MaskedNetwork) -> str:
    """Plain-text table (layer, kind, total, nonzero), one row per prunable layer."""
    lines = ["layer\tkind\ttotal\tnonzero"]
    for i in net.prunable_layers():
        m = net.layers[i].weight.mask
        lines.append(f"{i}\t{net.layers[i].kind}\t{m.size}\t{int(np.count_nonzero(m))}")
    return "\n".join(lines) + "\n"
