"""Run configuration: YAML schema, validation, flag overrides.

A run config is a YAML mapping with the sections ``domain``, ``net``,
``window``, ``train``, ``features``, ``paths`` and ``eval``; every key
must be known (unknown keys are rejected, naming the offender) and
relative paths resolve against the config file's directory.  The
effective configuration of every command is written next to its
artifacts and can re-drive the run.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .imaging import DomainParams
from .matching import WindowSpec
from .network import ABLATION_FLAGS, NetConfig
from .training import TrainConfig

__all__ = ["RunConfig", "load_config", "ConfigError"]


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


_PATH_KEYS = ("manifest", "backbone", "checkpoint", "out")
_EVAL_KEYS = ("deltas", "variants", "margin")
_FEATURE_KINDS = ("handcrafted", "backbone")


@dataclass
class RunConfig:
    domain: DomainParams = field(default_factory=DomainParams)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    feature_kind: str = "handcrafted"
    paths: dict = field(default_factory=dict)
    deltas: list = field(default_factory=lambda: [0, 5, 10, 20])
    variants: list = field(default_factory=lambda: list(ABLATION_FLAGS))
    margin: int = 0

    def path(self, key, required=False):
        value = self.paths.get(key)
        if value is None and required:
            raise ConfigError(f"config is missing required path {key!r}")
        return Path(value) if value is not None else None

    def to_dict(self):
        return {
            "domain": dataclasses.asdict(self.domain),
            "net": _net_dict(self.net),
            "window": dataclasses.asdict(self.net.window),
            "train": dataclasses.asdict(self.train),
            "features": {"source": self.feature_kind},
            "paths": {k: str(v) for k, v in self.paths.items()},
            "eval": {"deltas": list(self.deltas), "variants": list(self.variants), "margin": self.margin},
        }

    def write_yaml(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def _net_dict(net):
    d = dataclasses.asdict(net)
    d.pop("window")
    return d


def _build(cls, section, name):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def load_config(path):
    """Parse and validate a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    known_sections = {"domain", "net", "window", "train", "features", "paths", "eval"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    domain = _build(DomainParams, raw.get("domain", {}), "domain")
    window_raw = dict(raw.get("window", {}))
    for key in ("radii", "patch_sizes"):
        if key in window_raw:
            window_raw[key] = tuple(window_raw[key])
    window = _build(WindowSpec, window_raw, "window")
    net_raw = dict(raw.get("net", {}))
    if "window" in net_raw:
        raise ConfigError("window settings belong in the [window] section")
    net = _build(NetConfig, {**net_raw, "window": window}, "net")
    train = _build(TrainConfig, raw.get("train", {}), "train")

    features = dict(raw.get("features", {}))
    feature_kind = features.pop("source", "handcrafted")
    if features:
        raise ConfigError(f"unknown key(s) in [features]: {sorted(features)}")
    if feature_kind not in _FEATURE_KINDS:
        raise ConfigError(f"features.source must be one of {_FEATURE_KINDS}, got {feature_kind!r}")

    paths_raw = dict(raw.get("paths", {}))
    unknown = set(paths_raw) - set(_PATH_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) in [paths]: {sorted(unknown)}")
    paths = {
        key: str((path.parent / value).resolve())
        for key, value in paths_raw.items()
        if value is not None
    }

    eval_raw = dict(raw.get("eval", {}))
    unknown = set(eval_raw) - set(_EVAL_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) in [eval]: {sorted(unknown)}")
    variants = list(eval_raw.get("variants", list(ABLATION_FLAGS)))
    bad = set(variants) - set(ABLATION_FLAGS)
    if bad:
        raise ConfigError(f"unknown ablation variant(s): {sorted(bad)}")

    return RunConfig(
        domain=domain,
        net=net,
        train=train,
        feature_kind=feature_kind,
        paths=paths,
        deltas=list(eval_raw.get("deltas", [0, 5, 10, 20])),
        variants=variants,
        margin=int(eval_raw.get("margin", 0)),
    )
