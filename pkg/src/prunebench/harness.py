"""Experiment orchestration: calibration, robust accuracy, sweeps and reports.

A *cell* is one (seed, method, rate, attack) evaluation. Cells are
independent, seeded from their key, cached on disk as JSON, and a failing
cell is logged without stopping the sweep.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AttackRecord, BbConfig, CwConfig, GradientOracle, PgdConfig, bb_l0_batch, cw_l2_batch,
                      network_oracle, pgd_linf_batch, sample_starting_point)
from .data import Dataset, load_idx, split, synthetic_blobs
from .errors import CalibrationError, ContractError
from .model import MaskedNetwork, build_cnn5, load_checkpoint, predict, save_checkpoint
from .pruning import PruningMethod, advance, validate_rates
from .training import TrainConfig, train_to_convergence

log = logging.getLogger(__name__)

ATTACK_NORMS = {"pgd": "Linf", "cw": "L2", "bb": "L0"}
MINIMIZATION = ("cw", "bb")
NORM_KINDS = ("L0", "L2", "Linf")
CSV_FIELDS = ["method_structure", "criterion", "scope", "rate", "seed", "attack", "epsilon", "metric", "value",
              "n_samples"]


@dataclass(frozen=True)
class EpsilonGrid:
    kind: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ContractError(f"unknown norm kind {self.kind!r}")
        v = tuple(float(e) for e in self.values)
        object.__setattr__(self, "values", v)
        if not v or v[0] < 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ContractError(f"{self.kind} grid must be non-empty, non-negative and strictly increasing: {v}")


DEFAULT_GRIDS = {
    "Linf": EpsilonGrid("Linf", (0.125 / 255, 0.25 / 255, 0.5 / 255, 1 / 255)),
    "L0": EpsilonGrid("L0", (20, 70, 120, 170)),
    "L2": EpsilonGrid("L2", (10, 15, 20, 25)),
}


@dataclass
class PgdSettings:
    steps: int = 40
    rel_step: float = 0.1 / 3
    random_start: bool = True

    def __post_init__(self):
        PgdConfig(0.0, self.steps, self.rel_step, self.random_start)

    def at(self, eps: float) -> PgdConfig:
        return PgdConfig(eps, self.steps, self.rel_step, self.random_start)


@dataclass
class AttackSettings:
    pgd: PgdSettings = field(default_factory=PgdSettings)
    cw: CwConfig = field(default_factory=CwConfig)
    bb: BbConfig = field(default_factory=BbConfig)


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"  # "mnist" (IDX files in data_dir) or "synthetic"
    data_dir: str = "data/mnist"
    train_limit: int = 0  # 0 keeps every training image
    val_fraction: float = 0.1
    synthetic_classes: int = 3
    synthetic_train: int = 300
    synthetic_test: int = 100
    synthetic_shape: tuple[int, int, int] = (20, 20, 1)
    filters: tuple[int, int] = (16, 32)
    dense: tuple[int, int] = (128, 64)
    methods: tuple[str, ...] = ("unstructured-magnitude-global",)
    rates: tuple[int, ...] = (2, 4, 8, 16, 32, 64)
    attacks: tuple[str, ...] = ("pgd", "cw", "bb")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    subset: int = 256
    subset_seed: int = 0
    calibrate: bool = False
    grids: dict[str, EpsilonGrid] = field(default_factory=lambda: dict(DEFAULT_GRIDS))
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)

    def __post_init__(self):
        if self.dataset not in ("mnist", "synthetic"):
            raise ContractError(f"dataset: unknown dataset {self.dataset!r}")
        if len(self.seeds) < 1:
            raise ContractError("seeds: need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractError("seeds: duplicate seeds")
        if self.subset < 1:
            raise ContractError("subset: must be >= 1")
        if self.train_limit < 0:
            raise ContractError("train_limit: must be >= 0")
        try:
            validate_rates(self.rates)
        except ContractError as exc:
            raise ContractError(f"rates: {exc}") from None
        for m in self.methods:
            try:
                PruningMethod.parse(m)
            except ContractError as exc:
                raise ContractError(f"methods: {exc}") from None
        if len(set(self.methods)) != len(self.methods):
            raise ContractError("methods: duplicate methods")
        for a in self.attacks:
            if a not in ATTACK_NORMS:
                raise ContractError(f"attacks: unknown attack {a!r}")
        for kind, grid in self.grids.items():
            if grid.kind != kind:
                raise ContractError(f"epsilons: grid for {kind} holds {grid.kind}")

    def grid_for(self, attack: str) -> EpsilonGrid:
        return self.grids[ATTACK_NORMS[attack]]


@dataclass
class RobustnessReport:
    """Per-seed and seed-averaged accuracies.

    ``clean`` maps (method, rate, seed) and ``robust`` maps
    (method, rate, seed, attack, epsilon) to an accuracy in [0, 1].
    """
    clean: dict = field(default_factory=dict)
    robust: dict = field(default_factory=dict)
    n_samples: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    grids: dict[str, EpsilonGrid] = field(default_factory=dict)

    def seeds(self) -> list[int]:
        return sorted({k[2] for k in self.clean} | {k[2] for k in self.robust})

    def mean_clean(self) -> dict:
        return _seed_mean(self.clean, 2)

    def mean_robust(self) -> dict:
        return _seed_mean(self.robust, 2)

    def rows(self) -> list[dict]:
        """CSV rows, sorted; mean rows (seed ``mean``) only when there are several seeds."""
        out = []

        def emit(method, rate, seed, attack, eps, metric, value):
            m = PruningMethod.parse(method)
            out.append({"method_structure": m.structure, "criterion": m.criterion, "scope": m.scope,
                        "rate": rate, "seed": seed, "attack": attack, "epsilon": eps, "metric": metric,
                        "value": value, "n_samples": self.n_samples})

        for (method, rate, seed), v in sorted(self.clean.items()):
            emit(method, rate, seed, "none", "", "clean_acc", v)
        for (method, rate, seed, attack, eps), v in sorted(self.robust.items()):
            emit(method, rate, seed, attack, eps, "robust_acc", v)
        if len(self.seeds()) > 1:
            for (method, rate), v in sorted(self.mean_clean().items()):
                emit(method, rate, "mean", "none", "", "clean_acc", v)
            for (method, rate, attack, eps), v in sorted(self.mean_robust().items()):
                emit(method, rate, "mean", attack, eps, "robust_acc", v)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            row = dict(row)
            row["value"] = repr(float(row["value"]))
            if row["epsilon"] != "":
                row["epsilon"] = repr(float(row["epsilon"]))
            w.writerow(row)
        return buf.getvalue()


def _seed_mean(table: dict, seed_pos: int) -> dict:
    groups: dict = {}
    for key, v in table.items():
        groups.setdefault(key[:seed_pos] + key[seed_pos + 1:], []).append(v)
    return {k: float(np.mean(v)) for k, v in groups.items()}


# -- evaluation ------------------------------------------------------------------

def _sample_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n)


def _clean_record(x, y) -> AttackRecord:
    return AttackRecord(x, int(y), x.copy(), True, 0.0, 0.0, 0.0, 0, "clean")


def attack_records(oracle: GradientOracle, attack: str, ds: Dataset, settings: AttackSettings,
                   eps: float | None = None, seed: int = 0, start_pool: Dataset | None = None) -> list[AttackRecord]:
    """Attack every sample of ``ds``; samples the model already gets wrong are
    returned as zero-norm successes without running the attack."""
    if attack not in ATTACK_NORMS:
        raise ContractError(f"unknown attack {attack!r}")
    x, y = ds.images, ds.labels
    pred = oracle.predict(x)
    seeds = _sample_seeds(seed, len(ds))
    records: list[AttackRecord | None] = [None] * len(ds)
    for i in np.flatnonzero(pred != y):
        records[i] = _clean_record(x[i], y[i])
    todo = np.flatnonzero(pred == y)
    if todo.size:
        xs, ys, ss = x[todo], y[todo], seeds[todo]
        if attack == "pgd":
            if eps is None:
                raise ContractError("PGD needs an epsilon")
            found = pgd_linf_batch(oracle, xs, ys, settings.pgd.at(eps), ss)
        elif attack == "cw":
            found = cw_l2_batch(oracle, xs, ys, settings.cw, ss)
        else:
            pool = start_pool if start_pool is not None else ds
            pool_pred = oracle.predict(pool.images)
            starts = np.stack([sample_starting_point(oracle, pool, int(t), int(s), pool_pred)
                               for t, s in zip(ys, ss)])
            found = bb_l0_batch(oracle, xs, ys, starts, settings.bb, ss)
        for i, r in zip(todo, found):
            records[i] = r
    return records


def robust_flags(records: list[AttackRecord], eps: float) -> np.ndarray:
    """Robust iff no adversarial was found or its norm exceeds ``eps``.

    Records of fixed-budget attacks carry their budget implicitly, so only
    ``success`` matters for them.
    """
    out = []
    for r in records:
        if r.attack == "pgd":
            out.append(not r.success)
        else:
            kind = ATTACK_NORMS.get(r.attack)
            norm = 0.0 if r.attack == "clean" else r.norm(kind)
            out.append(not r.success or norm > eps)
    return np.array(out, dtype=bool)


def robust_accuracy(oracle: GradientOracle, attack: str, ds: Dataset, eps: float,
                    settings: AttackSettings | None = None, seed: int = 0,
                    start_pool: Dataset | None = None) -> float:
    if len(ds) == 0:
        raise ContractError("robust accuracy needs a non-empty subset")
    settings = settings or AttackSettings()
    records = attack_records(oracle, attack, ds, settings, eps, seed, start_pool)
    return float(robust_flags(records, eps).mean())


def retrospective_curve(records: list[AttackRecord], grid: EpsilonGrid) -> np.ndarray:
    """Accuracy at every grid value from a single minimization-attack run."""
    attacks = {r.attack for r in records} - {"clean"}
    if not attacks <= set(MINIMIZATION):
        raise ContractError(f"retrospective evaluation needs a minimization attack, got {sorted(attacks)}")
    for a in attacks:
        if ATTACK_NORMS[a] != grid.kind:
            raise ContractError(f"{a} records measure {ATTACK_NORMS[a]}, grid is {grid.kind}")
    if not records:
        raise ContractError("no records")
    return np.array([robust_flags(records, e).mean() for e in grid.values])


def grid_from_norms(norms: np.ndarray, clean_correct: np.ndarray, kind: str) -> EpsilonGrid:
    """Four values: the weakest drops accuracy by at most 1% absolute, the
    strongest fools more than half; the middle two are geometric in between.

    ``norms`` holds the minimal adversarial norm per sample (``inf`` when
    none was found, 0 for samples that are wrong to begin with).
    """
    n = len(norms)
    order = np.sort(norms)
    strongest = order[n // 2]
    if not np.isfinite(strongest):
        raise CalibrationError(f"{kind}: the attack fools at most half of the samples")
    allowed = math.floor(0.01 * n)
    correct = np.sort(norms[clean_correct])
    weakest_cap = correct[allowed] if allowed < correct.size else np.inf
    weakest = 0.5 * min(weakest_cap, strongest)
    if kind == "L0":
        strongest = float(math.ceil(strongest))
        weakest = float(math.ceil(weakest_cap) - 1) if np.isfinite(weakest_cap) else strongest - 3
        # one pixel is the smallest budget worth reporting, even if it costs more than 1%
        weakest = max(min(weakest, strongest - 3), 1.0)
        if weakest >= strongest - 2:
            raise CalibrationError("L0: too few pixels separate the weakest and strongest attack")
    if not 0 < weakest < strongest:
        raise CalibrationError(f"{kind}: degenerate grid ({weakest}, {strongest})")
    ratio = (strongest / weakest) ** (1 / 3)
    values = [weakest, weakest * ratio, weakest * ratio ** 2, strongest]
    if kind == "L0":
        values = [float(round(v)) for v in values]
        values[0], values[-1] = weakest, strongest
    return EpsilonGrid(kind, tuple(values))


def _minimal_norms(records: list[AttackRecord], kind: str) -> np.ndarray:
    return np.array([0.0 if r.attack == "clean" else (r.norm(kind) if r.success else np.inf) for r in records])


def calibrate_epsilons(oracle: GradientOracle, attack: str, ds: Dataset, settings: AttackSettings | None = None,
                       seed: int = 0, start_pool: Dataset | None = None, records=None,
                       pgd_start: float = 0.5 / 255, pgd_cap: float = 1.0, fallback: bool = True) -> EpsilonGrid:
    """Calibrate a four-value grid on the unpruned model.

    Minimization attacks run once (or reuse ``records``). PGD doubles
    ``eps`` until more than half the samples are fooled, bisects that
    threshold, then shrinks towards the weakest budget. A degenerate search
    falls back to the default grid; failing to fool half the samples at the
    cap is a :class:`CalibrationError`.
    """
    settings = settings or AttackSettings()
    kind = ATTACK_NORMS[attack]
    pred = oracle.predict(ds.images)
    correct = pred == ds.labels
    if attack in MINIMIZATION:
        if records is None:
            records = attack_records(oracle, attack, ds, settings, None, seed, start_pool)
        norms = _minimal_norms(records, kind)
        if np.sum(np.isfinite(norms)) * 2 <= len(norms):
            raise CalibrationError(f"{attack}: fooled at most half of the samples")
        try:
            return grid_from_norms(norms, correct, kind)
        except CalibrationError:
            if fallback:
                log.warning("calibration of %s degenerate; using default grid", attack)
                return DEFAULT_GRIDS[kind]
            raise

    def fooled(eps):
        return 1.0 - robust_accuracy(oracle, "pgd", ds, eps, settings, seed)

    clean_acc = float(correct.mean())
    hi = pgd_start
    while fooled(hi) <= 0.5:
        if hi >= pgd_cap:
            raise CalibrationError(f"PGD fools at most half of the samples at eps={pgd_cap}")
        hi = min(2 * hi, pgd_cap)
    lo = hi / 2 if hi > pgd_start else 0.0
    for _ in range(4):
        mid = (lo + hi) / 2
        if fooled(mid) > 0.5:
            hi = mid
        else:
            lo = mid
    strongest = hi
    weakest = strongest / 2
    while 1.0 - fooled(weakest) < clean_acc - 0.01:
        weakest /= 2
        if weakest < strongest * 1e-4:
            if fallback:
                log.warning("PGD calibration could not find a harmless budget; using default grid")
                return DEFAULT_GRIDS[kind]
            raise CalibrationError("PGD: no budget leaves accuracy within 1%")
    ratio = (strongest / weakest) ** (1 / 3)
    return EpsilonGrid(kind, (weakest, weakest * ratio, weakest * ratio ** 2, strongest))


# -- margin tables ---------------------------------------------------------------

@dataclass(frozen=True)
class MarginCell:
    value: float
    margin: float
    increase: bool

    def __str__(self) -> str:
        return f"{self.value:.2f} ({self.margin:.2f})" + ("*" if self.increase else "")


def margin_table(table: dict[str, dict[int, float]], baseline_rate: int = 1) -> dict[str, dict[int, MarginCell]]:
    """``table[row][rate]`` holds accuracies in percent; margins are in
    percentage points relative to the ``baseline_rate`` column, rounded to two
    decimals, and flagged when positive."""
    out = {}
    for row, cols in table.items():
        if baseline_rate not in cols:
            raise ContractError(f"row {row!r} has no rate-{baseline_rate} baseline")
        base = cols[baseline_rate]
        cells = {}
        for rate, v in cols.items():
            if rate == baseline_rate:
                continue
            m = round(v - base, 2) + 0.0
            cells[rate] = MarginCell(v, m, m > 0)
        out[row] = cells
    return out


# -- sweep -----------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test)."""
    if cfg.dataset == "synthetic":
        shape = tuple(cfg.synthetic_shape)
        full = synthetic_blobs(cfg.synthetic_classes, cfg.synthetic_train + cfg.synthetic_test, shape, seed=1234)
        train = full.subset(np.arange(cfg.synthetic_train))
        test = full.subset(np.arange(cfg.synthetic_train, len(full)))
    else:
        d = Path(cfg.data_dir)
        train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
        test = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    tr, val = split(train, cfg.val_fraction, seed=0)
    return tr, val, test


def evaluation_subset(test: Dataset, size: int, seed: int) -> Dataset:
    if size > len(test):
        raise ContractError(f"subset of {size} exceeds the {len(test)} test images")
    order = np.random.default_rng(seed).permutation(len(test))
    return test.subset(np.sort(order[:size]))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def derive_seed(*parts) -> int:
    ints = [int(hashlib.sha256(str(p).encode()).hexdigest()[:8], 16) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _cell_name(seed, method, rate, attack) -> str:
    return f"s{seed}_{method}_r{rate}_{attack}"


@dataclass
class _Context:
    cfg: ExperimentConfig
    out: Path | None
    resume: bool
    train: Dataset
    val: Dataset
    test: Dataset
    subset: Dataset


def _cell_path(ctx: _Context, name: str) -> Path | None:
    return None if ctx.out is None else ctx.out / "cells" / f"{name}.json"


def _evaluate_model(ctx: _Context, net: MaskedNetwork, seed: int, method: str, rate: int,
                    grids: dict[str, EpsilonGrid], known: dict | None = None) -> tuple[dict, list]:
    """Clean and robust accuracies for one model, one cell per attack.

    ``known`` may hold minimization-attack records already computed for
    this exact model and cell seed (during calibration).
    """
    results: dict = {"clean": None, "robust": {}}
    failures = []
    oracle = network_oracle(net)
    results["clean"] = float(np.mean(oracle.predict(ctx.subset.images) == ctx.subset.labels))
    for attack in ctx.cfg.attacks:
        name = _cell_name(seed, method, rate, attack)
        path = _cell_path(ctx, name)
        if ctx.resume and path is not None and path.exists():
            cached = json.loads(path.read_text())
            if cached.get("fingerprint") == oracle.fingerprint:
                results["robust"][attack] = cached["accuracy"]
                continue
        log.info("cell %s", name)
        try:
            grid = grids[ATTACK_NORMS[attack]]
            cell_seed = derive_seed(seed, method, rate, attack)
            if attack == "pgd":
                acc = [robust_accuracy(oracle, "pgd", ctx.subset, e, ctx.cfg.attack, cell_seed)
                       for e in grid.values]
            else:
                recs = (known or {}).get(attack)
                if recs is None:
                    recs = attack_records(oracle, attack, ctx.subset, ctx.cfg.attack, None, cell_seed, ctx.test)
                acc = retrospective_curve(recs, grid).tolist()
        except Exception as exc:  # one cell must not abort the sweep
            log.error("cell %s failed: %s", name, exc)
            failures.append((name, "".join(traceback.format_exception_only(type(exc), exc)).strip()))
            continue
        results["robust"][attack] = acc
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps({"fingerprint": oracle.fingerprint, "epsilons": list(grid.values),
                                        "accuracy": acc}, sort_keys=True))
    return results, failures


def _trainer(ctx: _Context, seed: int, method: str):
    def fine_tune(net: MaskedNetwork, rate: int) -> MaskedNetwork:
        net, _ = train_to_convergence(net, ctx.train, ctx.val, ctx.cfg.finetune, seed=derive_seed(seed, method, rate))
        return net
    return fine_tune


def _checkpoint(ctx: _Context, seed: int, method: str, rate: int) -> Path | None:
    if ctx.out is None:
        return None
    return ctx.out / "checkpoints" / f"seed{seed}" / f"{method}_r{rate}.pbck"


def _baseline(ctx: _Context, seed: int) -> MaskedNetwork:
    path = _checkpoint(ctx, seed, "unpruned", 1)
    if ctx.resume and path is not None and path.exists():
        return load_checkpoint(path)
    cfg = ctx.cfg
    shape = ctx.train.images.shape[1:]
    net = build_cnn5(shape, max(ctx.train.class_count, ctx.test.class_count), seed=seed,
                     filters=tuple(cfg.filters), dense=tuple(cfg.dense))
    log.info("training unpruned model, seed %d", seed)
    net, _ = train_to_convergence(net, ctx.train, ctx.val, cfg.train, seed=seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, path)
    return net


def _run_chain(ctx: _Context, seed: int, method_name: str, base: MaskedNetwork, grids) -> tuple[dict, list]:
    """Prune -> fine-tune -> evaluate along the rate schedule for one method."""
    method = PruningMethod.parse(method_name)
    out: dict = {}
    failures: list = []
    net, current = base.copy(), 1
    trainer = _trainer(ctx, seed, method_name)
    for rate in ctx.cfg.rates:
        path = _checkpoint(ctx, seed, method_name, rate)
        try:
            if ctx.resume and path is not None and path.exists():
                net = load_checkpoint(path)
            else:
                log.info("pruning %s seed %d to rate %d", method_name, seed, rate)
                net = advance(net, method, current, rate, trainer, seed=seed)
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(net, path)
            current = rate
        except Exception as exc:
            log.error("pruning %s seed %d rate %d failed: %s", method_name, seed, rate, exc)
            for attack in ("clean",) + tuple(ctx.cfg.attacks):
                failures.append((_cell_name(seed, method_name, rate, attack), f"{type(exc).__name__}: {exc}"))
            break
        out[rate], fails = _evaluate_model(ctx, net, seed, method_name, rate, grids)
        failures += fails
    return out, failures


def _chain_job(args):
    ctx, seed, method, base_bytes, grids = args
    from .model import from_bytes
    return _run_chain(ctx, seed, method, from_bytes(base_bytes), grids)


def _calibrate(ctx: _Context, base: MaskedNetwork, seed: int) -> tuple[dict[str, EpsilonGrid], dict]:
    """Calibrated grids plus the minimization-attack records they came from
    (same cell seed as the unpruned evaluation, so they can be reused)."""
    grids = dict(ctx.cfg.grids)
    oracle = network_oracle(base)
    records = {}
    for attack in ctx.cfg.attacks:
        log.info("calibrating %s", attack)
        cell_seed = derive_seed(seed, "unpruned", 1, attack)
        if attack in MINIMIZATION:
            records[attack] = attack_records(oracle, attack, ctx.subset, ctx.cfg.attack, None, cell_seed, ctx.test)
        grids[ATTACK_NORMS[attack]] = calibrate_epsilons(oracle, attack, ctx.subset, ctx.cfg.attack, cell_seed,
                                                         ctx.test, records=records.get(attack))
    return grids, records


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool = False, jobs: int = 1) -> RobustnessReport:
    """Full sweep. With ``out_dir`` set, checkpoints, per-cell results and
    the report CSV are written there; ``resume`` reuses whatever exists."""
    from .model import to_bytes

    out = Path(out_dir) if out_dir is not None else None
    train, val, test = load_datasets(cfg)
    ctx = _Context(cfg, out, resume, train, val, test, evaluation_subset(test, cfg.subset, cfg.subset_seed))
    report = RobustnessReport(n_samples=len(ctx.subset))

    grids = dict(cfg.grids)
    grids_path = out / "grids.json" if out is not None else None
    if cfg.calibrate and resume and grids_path is not None and grids_path.exists():
        raw = json.loads(grids_path.read_text())
        grids = {k: EpsilonGrid(k, tuple(v)) for k, v in raw.items()}
    calibrated = not cfg.calibrate or (resume and grids_path is not None and grids_path.exists())

    for seed in cfg.seeds:
        try:
            base = _baseline(ctx, seed)
        except Exception as exc:
            log.error("training seed %d failed: %s", seed, exc)
            report.failures.append((_cell_name(seed, "unpruned", 1, "train"), f"{type(exc).__name__}: {exc}"))
            continue
        known = {}
        if not calibrated:
            grids, known = _calibrate(ctx, base, seed)
            calibrated = True
            if grids_path is not None:
                grids_path.parent.mkdir(parents=True, exist_ok=True)
                grids_path.write_text(json.dumps({k: list(g.values) for k, g in sorted(grids.items())}, indent=1))

        # the unpruned model is shared by every method of this seed
        base_res, fails = _evaluate_model(ctx, base, seed, "unpruned", 1, grids, known)
        report.failures += fails
        per_method = {}
        if jobs > 1 and len(cfg.methods) > 1:
            blob = to_bytes(base)
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                done = pool.map(_chain_job, [(ctx, seed, m, blob, grids) for m in cfg.methods])
                per_method = dict(zip(cfg.methods, done))
        else:
            per_method = {m: _run_chain(ctx, seed, m, base, grids) for m in cfg.methods}

        for method in cfg.methods:
            chain, fails = per_method[method]
            report.failures += fails
            for rate, res in [(1, base_res)] + sorted(chain.items()):
                report.clean[(method, rate, seed)] = res["clean"]
                for attack, accs in res["robust"].items():
                    for eps, acc in zip(grids[ATTACK_NORMS[attack]].values, accs):
                        report.robust[(method, rate, seed, attack, eps)] = float(acc)

    report.grids = grids
    if out is not None:
        write_report(report, out)
    return report


# -- report files ----------------------------------------------------------------

def write_report(report: RobustnessReport, out: Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.csv"]
    paths[0].write_text(report.to_csv())
    paths += write_curves(report, out / "curves")
    fail_path = out / "failures.csv"
    with fail_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "error"])
        w.writerows(sorted(report.failures))
    paths.append(fail_path)
    return paths


def write_curves(report: RobustnessReport, out: Path) -> list[Path]:
    """One file per (attack, epsilon index) plus ``clean.csv``: rows are
    rates, columns are methods, values are seed means."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clean = report.mean_clean()
    robust = report.mean_robust()
    methods = sorted({k[0] for k in clean})
    rates = sorted({k[1] for k in clean})
    paths = []

    def dump(path, lookup):
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rate"] + methods)
            for rate in rates:
                w.writerow([rate] + [repr(lookup[(m, rate)]) if (m, rate) in lookup else "" for m in methods])
        paths.append(path)

    dump(out / "clean.csv", clean)
    for attack in sorted({k[2] for k in robust}):
        eps_values = sorted({k[3] for k in robust if k[2] == attack})
        for i, eps in enumerate(eps_values, 1):
            lookup = {(k[0], k[1]): v for k, v in robust.items() if k[2] == attack and k[3] == eps}
            dump(out / f"{attack}_eps{i}.csv", lookup)
    return paths


def manifest_dict(cfg: ExperimentConfig, out: Path, artifacts: list[Path]) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "seeds": list(cfg.seeds),
        "artifacts": sorted(str(Path(p).relative_to(out)) for p in artifacts),
        "version": __version__,
    }
