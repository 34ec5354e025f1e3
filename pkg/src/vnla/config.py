"""Run configuration: packaged YAML defaults, an optional user file, and key=value overrides."""
from __future__ import annotations

import copy
from importlib import resources

import yaml

from vnla.oracle import ALL_RULES


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("vnla").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} is a section, not a value")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from exc
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, user)
    for item in overrides:
        _merge(cfg, parse_override(item))
    validate(cfg)
    return cfg


def rules_from(value) -> frozenset:
    if value is None:
        return frozenset()
    if isinstance(value, str):
        items = [c for c in value.replace(",", "") if not c.isspace()]
    else:
        items = list(value)
    rules = frozenset(items)
    if not rules <= ALL_RULES:
        raise ConfigError(f"unknown help-requesting rules {sorted(rules - ALL_RULES)}")
    return rules


def validate(cfg: dict) -> None:
    wg = cfg["worldgen"]
    if not 0 < wg["train_fraction"] < 1 or wg["dev_fraction"] < 0:
        raise ConfigError("worldgen fractions must leave room for every split")
    if wg["train_fraction"] + wg["dev_fraction"] >= 1:
        raise ConfigError("worldgen.train_fraction + dev_fraction must be < 1")
    if cfg["datagen"]["mode"] not in ("asknav", "noroom"):
        raise ConfigError("datagen.mode must be asknav or noroom")
    tr = cfg["training"]
    if not 0 <= tr["tau"] <= 1 or tr["k"] < 1:
        raise ConfigError("training.tau must be in [0, 1] and training.k >= 1")
    if tr["batch_size"] < 1 or tr["iterations"] < 0:
        raise ConfigError("training.batch_size must be >= 1 and iterations >= 0")
    if not 0 <= cfg["policy"]["dropout"] < 1:
        raise ConfigError("policy.dropout must be in [0, 1)")
    if cfg["ask_teacher"]["deviation"] not in ("euclidean", "geodesic"):
        raise ConfigError("ask_teacher.deviation must be euclidean or geodesic")
    for section in ("training", "eval"):
        if cfg[section]["ask_kind"] not in ("none", "first", "random", "teacher", "learned"):
            raise ConfigError(f"{section}.ask_kind is not a known ask policy")
        if cfg[section]["advisor_mode"] not in ("indirect", "direct_sub", "direct_nosub"):
            raise ConfigError(f"{section}.advisor_mode is not a known advisor mode")
    if not cfg["eval"]["seeds"]:
        raise ConfigError("eval.seeds must not be empty")
    rules_from(cfg["ask_teacher"]["rules"])


def with_overrides(cfg: dict, **sections) -> dict:
    out = copy.deepcopy(cfg)
    _merge(out, sections)
    validate(out)
    return out
