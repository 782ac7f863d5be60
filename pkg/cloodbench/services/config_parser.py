"""Flat ``section.key = value`` experiment files -> ExperimentConfig."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ValidationError

from cloodbench.errors import ConfigError
from cloodbench.models.experiment import ExperimentConfig

logger = logging.getLogger(__name__)


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value.startswith("[") and value.endswith("]"):
        inner = value[1:-1].strip()
        return [_unquote(item.strip()) for item in inner.split(",")] if inner else []
    return _unquote(value)


def _unquote(value: str) -> str:
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value


def _known_keys(model: type[BaseModel]) -> set[str]:
    keys = set()
    for name, info in model.model_fields.items():
        keys.add(name)
        if info.alias:
            keys.add(info.alias)
    return keys


def _section_model(name: str) -> type[BaseModel] | None:
    info = ExperimentConfig.model_fields.get(name)
    if info is None:
        return None
    annotation = info.annotation
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    return None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse config text; unknown keys and type mismatches raise ConfigError with the key path."""
    tree: dict[str, Any] = {}
    seen: set[str] = set()
    unknown: list[str] = []

    for line_no, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        key, sep, raw = content.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'section.key = value', got {line.strip()!r}")
        if key in seen:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        seen.add(key)

        section, dot, name = key.partition(".")
        if not dot:
            if key not in ExperimentConfig.model_fields or _section_model(key) is not None:
                unknown.append(key)
                continue
            tree[key] = _parse_value(raw)
            continue
        model = _section_model(section)
        if model is None or name not in _known_keys(model):
            unknown.append(key)
            continue
        tree.setdefault(section, {})[name] = _parse_value(raw)

    if unknown:
        raise ConfigError(f"unknown config key(s) in {source}: {', '.join(unknown)}")

    return _validate(tree, source)


def _validate(tree: dict[str, Any], source: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            path = ".".join(str(part) for part in err["loc"]) or "<root>"
            problems.append(f"{path}: {err['msg']}")
        raise ConfigError(f"invalid config {source}: " + "; ".join(problems)) from exc


def with_overrides(cfg: ExperimentConfig, **sections: Any) -> ExperimentConfig:
    """Copy of ``cfg`` with the given section keys replaced, revalidated as a whole.

    Dict values update a section key by key; anything else (``detectors``)
    replaces the field.
    """
    tree = cfg.model_dump(by_alias=True)
    for name, values in sections.items():
        if name not in ExperimentConfig.model_fields:
            raise ConfigError(f"unknown config section {name!r}")
        if isinstance(values, dict):
            tree[name].update(values)
        else:
            tree[name] = values
    return _validate(tree, "<overrides>")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} is not readable")
    cfg = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("Loaded config %s (strategy=%s, ood_train=%s)", path, cfg.strategy.kind, cfg.ood_train.kind)
    return cfg
