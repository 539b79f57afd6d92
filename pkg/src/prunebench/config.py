"""Experiment configuration files.

INI layout with JSON values::

    [experiment]
    methods = ["filter-magnitude-local"]
    rates = [2, 4, 8]
    seeds = [0]

    [bb]
    inner_steps = 100

    [epsilons]
    L0 = [5, 10, 15, 20]

Sections: ``experiment``, ``train``, ``finetune``, ``pgd``, ``cw``, ``bb`` and
``epsilons``. Bare words are read as strings. Missing keys keep their
defaults; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import re
from pathlib import Path

from .attacks import BbConfig, CwConfig
from .errors import ConfigError, ContractError
from .harness import DEFAULT_GRIDS, NORM_KINDS, AttackSettings, EpsilonGrid, ExperimentConfig, PgdSettings
from .training import TrainConfig

SECTIONS = {
    "experiment": ExperimentConfig,
    "train": TrainConfig,
    "finetune": TrainConfig,
    "pgd": PgdSettings,
    "cw": CwConfig,
    "bb": BbConfig,
}
_NESTED = {"grids", "train", "finetune", "attack"}
_KEY_LINE = re.compile(r"^\s*([^=:\s\[][^=:]*?)\s*[=:]")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_map(text: str) -> dict[tuple[str, str], int]:
    out, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_LINE.match(line)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = n
            continue
        m = _KEY_LINE.match(line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip()), n)
    return out


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls) if not (cls is ExperimentConfig and f.name in _NESTED)}


def _coerce(raw: str, f: dataclasses.Field):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    kind = str(f.type)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"expected true or false, got {raw!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"expected an integer, got {raw!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return value
    if kind.startswith("tuple"):
        if not isinstance(value, list):
            raise ValueError(f"expected a list, got {raw!r}")
        item = "str" if "str" in kind else "int"
        for v in value:
            ok = isinstance(v, str) if item == "str" else isinstance(v, int) and not isinstance(v, bool)
            if not ok:
                raise ValueError(f"expected a list of {item} values, got {raw!r}")
        return tuple(value)
    raise ValueError(f"unsupported field type {kind}")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        where = f"{source}:{line}" if line is not None else source
        raise ConfigError(f"{where}: {exc.message.splitlines()[0] if hasattr(exc, 'message') else exc}") from None

    lines = _line_map(text)

    def fail(section, key, msg):
        n = lines.get((section, key)) or lines.get((section, ""))
        where = f"{source}:{n}" if n else source
        label = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {label}: {msg}")

    values: dict[str, dict] = {name: {} for name in SECTIONS}
    grids = dict(DEFAULT_GRIDS)
    for section in parser.sections():
        if section == "epsilons":
            for key, raw in parser.items(section):
                if key not in NORM_KINDS:
                    fail(section, key, f"unknown norm; expected one of {', '.join(NORM_KINDS)}")
                try:
                    vals = json.loads(raw)
                    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                             for v in vals):
                        raise ValueError("expected a list of numbers")
                    grids[key] = EpsilonGrid(key, tuple(vals))
                except (ValueError, ContractError) as exc:
                    fail(section, key, str(exc))
            continue
        if section not in SECTIONS:
            fail(section, "", f"unknown section; expected one of {', '.join(list(SECTIONS) + ['epsilons'])}")
        known = _fields(SECTIONS[section])
        for key, raw in parser.items(section):
            if key not in known:
                fail(section, key, "unknown key")
            try:
                values[section][key] = _coerce(raw, known[key])
            except ValueError as exc:
                fail(section, key, str(exc))

    built = {}
    for section in ("train", "finetune", "pgd", "cw", "bb"):
        try:
            built[section] = SECTIONS[section](**values[section])
        except ContractError as exc:
            fail(section, "", str(exc))
    try:
        return ExperimentConfig(
            **values["experiment"], grids=grids, train=built["train"], finetune=built["finetune"],
            attack=AttackSettings(built["pgd"], built["cw"], built["bb"]),
        )
    except ContractError as exc:
        key, _, msg = str(exc).partition(":")
        if key in _fields(ExperimentConfig):
            fail("experiment", key, msg.strip())
        fail("experiment", "", str(exc))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def _format(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text: every section and key, in declaration order."""
    parts = {
        "experiment": cfg, "train": cfg.train, "finetune": cfg.finetune,
        "pgd": cfg.attack.pgd, "cw": cfg.attack.cw, "bb": cfg.attack.bb,
    }
    out = []
    for section, obj in parts.items():
        out.append(f"[{section}]")
        for name, f in _fields(type(obj)).items():
            value = getattr(obj, name)
            out.append(f"{name} = {_format(float(value) if str(f.type) == 'float' else value)}")
        out.append("")
    out.append("[epsilons]")
    for kind in sorted(cfg.grids):
        out.append(f"{kind} = {_format(list(cfg.grids[kind].values))}")
    return "\n".join(out) + "\n"
