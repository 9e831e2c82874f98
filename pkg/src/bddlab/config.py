"""YAML experiment files -> (DataConfig, TrainConfig, sweep seeds).

Every section and key is checked against the dataclass fields; problems are
reported with the YAML line of the offending key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .autodiff import ParameterError
from .losses import DistillConfig
from .train import ConfigError, DataConfig, TrainConfig

SECTIONS = ("data", "train", "distill", "sweep")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = tuple(range(10))


def _key_lines(text: str) -> dict[str, int]:
    lines: dict[str, int] = {}
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return lines
    for knode, vnode in root.value:
        lines[knode.value] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                lines[f"{knode.value}.{k2.value}"] = k2.start_mark.line + 1
    return lines


def _coerce(name: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or name in ("student_per_class",):
        if value is None and name == "student_per_class":
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise TypeError(f"expected a list of numbers, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {value!r}")
        return value
    return value


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _section(raw: dict, name: str, cls, lines: dict, skip: tuple[str, ...] = ()) -> dict:
    body = raw.get(name) or {}
    if not isinstance(body, dict):
        raise ConfigError(f"line {lines.get(name, '?')}: section '{name}' must be a mapping")
    defaults = _defaults(cls)
    out = {}
    for key, value in body.items():
        where = f"line {lines.get(f'{name}.{key}', '?')}: field {name}.{key}"
        if key not in defaults or key in skip:
            raise ConfigError(f"{where}: unknown field")
        try:
            out[key] = _coerce(key, value, defaults[key])
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return out


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise ConfigError(f"{where}malformed YAML ({getattr(exc, 'problem', exc)})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with sections " + ", ".join(SECTIONS))
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"line {lines.get(key, '?')}: unknown section '{key}'")

    def _build(cls, section, kwargs, **extra):
        try:
            return cls(**kwargs, **extra)
        except (ConfigError, ParameterError) as exc:
            raise ConfigError(f"line {lines.get(section, '?')}: section '{section}': {exc}") from None

    data = _build(DataConfig, "data", _section(raw, "data", DataConfig, lines))
    distill_kw = _section(raw, "distill", DistillConfig, lines)
    if data.task == "segmentation":
        distill_kw = {"beta": 3.0, "normalize_by_classes": True, **distill_kw}
    distill = _build(DistillConfig, "distill", distill_kw)
    train = _build(TrainConfig, "train", _section(raw, "train", TrainConfig, lines, skip=("distill",)), distill=distill)

    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict) or set(sweep) - {"seeds"}:
        raise ConfigError(f"line {lines.get('sweep', '?')}: section 'sweep' accepts only 'seeds'")
    seeds = sweep.get("seeds", list(range(10)))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"line {lines.get('sweep.seeds', '?')}: field sweep.seeds: expected a nonempty list of integers")
    return ExperimentConfig(data, train, tuple(seeds))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` for the fields it understands."""
    train = cfg.train.to_dict()
    distill = train.pop("distill")
    data = dataclasses.asdict(cfg.data)
    return yaml.safe_dump({"data": data, "train": train, "distill": distill, "sweep": {"seeds": list(cfg.seeds)}}, sort_keys=False)
