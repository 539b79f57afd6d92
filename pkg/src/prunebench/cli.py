"""Command-line entry point: ``prunebench {run,report,calibrate,attack-one}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, parse_config
from .errors import ConfigError, ContractError, FormatError
from .harness import (ATTACK_NORMS, EpsilonGrid, ExperimentConfig, RobustnessReport, calibrate_epsilons,
                      config_hash, evaluation_subset, load_datasets, margin_table, run_experiment, write_curves)

log = logging.getLogger("prunebench")

SEED_ENV = "PRUNEBENCH_SEED"
MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    config_hash: str
    seeds: list[int]
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__

    def write(self, out: Path) -> Path:
        path = Path(out) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, out: Path) -> RunManifest:
        path = Path(out) / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST} in {out}; run `prunebench run` first")
        return cls(**json.loads(path.read_text()))

    def missing(self, out: Path) -> list[str]:
        return [a for a in self.artifacts if not (Path(out) / a).exists()]


def _setup_logging(out: Path | None, verbose: bool = False) -> None:
    root = logging.getLogger("prunebench")
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    root.addHandler(err)
    if out is not None:
        fh = logging.FileHandler(out / "run.log")
        fh.setFormatter(fmt)
        root.addHandler(fh)


def apply_overrides(cfg: ExperimentConfig, seeds=None, subset=None, env=None) -> ExperimentConfig:
    """Seed precedence: explicit ``seeds`` > ``PRUNEBENCH_SEED`` (shifts the
    base of the configured seed list) > config file."""
    env = os.environ if env is None else env
    if seeds is not None:
        cfg = replace(cfg, seeds=tuple(seeds))
    elif env.get(SEED_ENV):
        try:
            base = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = replace(cfg, seeds=tuple(base + i for i in range(len(cfg.seeds))))
    if subset is not None:
        cfg = replace(cfg, subset=subset)
    return cfg


def _collect_artifacts(out: Path) -> list[str]:
    names = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in (MANIFEST, "run.log"):
            names.append(str(p.relative_to(out)))
    return names


def cmd_run(config_path, out_dir, seeds=None, subset=None, jobs=None, resume=False) -> int:
    try:
        cfg = parse_config(config_path) if config_path else ExperimentConfig()
        cfg = apply_overrides(cfg, seeds, subset)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    _setup_logging(out)
    jobs = jobs or os.cpu_count() or 1
    try:
        report = run_experiment(cfg, out, resume=resume, jobs=jobs)
    except (OSError, FormatError, ContractError) as exc:
        log.error("run aborted: %s", exc)
        return 2
    RunManifest(config_hash(cfg), list(cfg.seeds), _collect_artifacts(out)).write(out)
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed:", file=sys.stderr)
        for name, err in sorted(report.failures):
            print(f"  {name}: {err}", file=sys.stderr)
        return 1
    return 0


# -- report ----------------------------------------------------------------------

def report_from_csv(path) -> RobustnessReport:
    """Rebuild per-seed entries from a report CSV (seed-mean rows are ignored)."""
    rep = RobustnessReport()
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row["seed"] == "mean":
                continue
            method = f"{row['method_structure']}-{row['criterion']}-{row['scope']}"
            rate, seed = int(row["rate"]), int(row["seed"])
            rep.n_samples = int(row["n_samples"])
            if row["metric"] == "clean_acc":
                rep.clean[(method, rate, seed)] = float(row["value"])
            else:
                rep.robust[(method, rate, seed, row["attack"], float(row["epsilon"]))] = float(row["value"])
    return rep


def _fmt_eps(attack: str, eps: float) -> str:
    if ATTACK_NORMS[attack] == "L0":
        return f"{eps:g}"
    return f"{eps:.6g}"


def margin_rows(rep: RobustnessReport) -> list[dict]:
    """Long-format margin table: one row per (method, test data, rate > 1)."""
    clean, robust = rep.mean_clean(), rep.mean_robust()
    methods = sorted({k[0] for k in clean} | {k[0] for k in robust})
    out = []
    for method in methods:
        table: dict[str, dict[int, float]] = {}
        table["benign"] = {rate: 100 * v for (m, rate), v in clean.items() if m == method}
        for (m, rate, attack, eps), v in sorted(robust.items()):
            if m == method:
                table.setdefault(f"{attack} eps={_fmt_eps(attack, eps)}", {})[rate] = 100 * v
        for row, cells in margin_table(table).items():
            for rate, cell in sorted(cells.items()):
                out.append({"method": method, "test_data": row, "rate": rate, "value": f"{cell.value:.2f}",
                            "margin": f"{cell.margin:.2f}", "increase": int(cell.increase)})
    return out


def cmd_report(out_dir) -> int:
    out = Path(out_dir)
    try:
        manifest = RunManifest.read(out)
    except (FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    missing = manifest.missing(out)
    if missing:
        print(f"warning: {len(missing)} artifact(s) listed in the manifest are missing", file=sys.stderr)
    rep = report_from_csv(out / "report.csv")
    tables = out / "tables"
    tables.mkdir(exist_ok=True)

    clean = rep.mean_clean()
    methods = sorted({k[0] for k in clean})
    rates = sorted({k[1] for k in clean})
    with (tables / "clean.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + [f"rate_{r}" for r in rates])
        for m in methods:
            w.writerow([m] + [f"{100 * clean[(m, r)]:.2f}" if (m, r) in clean else "" for r in rates])

    try:
        rows = margin_rows(rep)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    with (tables / "margins.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", "test_data", "rate", "value", "margin", "increase"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_curves(rep, out / "curves")
    print(f"wrote {tables / 'clean.csv'}, {tables / 'margins.csv'} and curves in {out / 'curves'}")
    return 0


# -- calibrate / attack-one --------------------------------------------------------

def cmd_calibrate(config_path, out_dir, seed=None) -> int:
    from .harness import _baseline, _calibrate, _Context

    try:
        cfg = parse_config(config_path) if config_path else ExperimentConfig()
        cfg = apply_overrides(cfg, [seed] if seed is not None else None)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out)
    train, val, test = load_datasets(cfg)
    ctx = _Context(cfg, out, True, train, val, test, evaluation_subset(test, cfg.subset, cfg.subset_seed))
    base = _baseline(ctx, cfg.seeds[0])
    grids, _ = _calibrate(ctx, base, cfg.seeds[0])
    print("[epsilons]")
    for kind in sorted(grids):
        print(f"{kind} = {json.dumps(list(grids[kind].values))}")
    return 0


def cmd_attack_one(config_path, checkpoint, index: int, attack: str, eps=None, seed: int = 0) -> int:
    from .attacks import network_oracle
    from .data import Dataset
    from .harness import attack_records
    from .model import load_checkpoint

    try:
        cfg = parse_config(config_path) if config_path else ExperimentConfig()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if attack not in ATTACK_NORMS:
        print(f"error: unknown attack {attack!r}", file=sys.stderr)
        return 2
    _, _, test = load_datasets(cfg)
    net = load_checkpoint(checkpoint)
    one = Dataset(test.images[index:index + 1], test.labels[index:index + 1])
    grid: EpsilonGrid = cfg.grid_for(attack)
    eps = grid.values[-1] if eps is None else eps
    rec = attack_records(network_oracle(net), attack, one, cfg.attack, eps, seed, test)[0]
    print(json.dumps({"index": index, "label": rec.y, "attack": attack, "success": rec.success, "L0": rec.l0,
                      "L2": rec.l2, "Linf": rec.linf, "iterations": rec.iterations,
                      "prediction": int(np.argmax(network_oracle(net).logits(
                          (rec.x_adv if rec.x_adv is not None else rec.x)[None])[0]))}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunebench", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, prune, attack and write the report")
    run.add_argument("--config", help="INI experiment config (defaults when omitted)")
    run.add_argument("--out", required=True, help="artifact directory")
    run.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated seeds")
    run.add_argument("--subset", type=int, help="number of evaluation images")
    run.add_argument("--jobs", type=int, help="worker processes (default: core count)")
    run.add_argument("--resume", action="store_true", help="reuse checkpoints and finished cells")

    rep = sub.add_parser("report", help="tables, margins and curves from a finished run")
    rep.add_argument("--out", required=True)

    cal = sub.add_parser("calibrate", help="print calibrated epsilon grids for the unpruned model")
    cal.add_argument("--config")
    cal.add_argument("--out", help="checkpoint cache directory")
    cal.add_argument("--seed", type=int)

    one = sub.add_parser("attack-one", help="attack a single test image")
    one.add_argument("--config")
    one.add_argument("--checkpoint", required=True)
    one.add_argument("--index", type=int, default=0)
    one.add_argument("--attack", default="pgd", choices=sorted(ATTACK_NORMS))
    one.add_argument("--eps", type=float)
    one.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seeds, args.subset, args.jobs, args.resume)
    if args.command == "report":
        return cmd_report(args.out)
    if args.command == "calibrate":
        return cmd_calibrate(args.config, args.out, args.seed)
    return cmd_attack_one(args.config, args.checkpoint, args.index, args.attack, args.eps, args.seed)


if __name__ == "__main__":
    sys.exit(main())
