"""Nested experiment configuration: YAML document, dotted overrides, strict keys."""

from __future__ import annotations

import copy
import os
from dataclasses import fields, replace
from pathlib import Path

import yaml

from .corpus import SyntheticSpec
from .trainer import ABLATION_FLAGS, ABLATION_VARIANTS, HyperParams

OUTPUT_ROOT_ENV = "CDSR_OUTPUT_ROOT"

# HyperParams fields that live in sections other than "train"
_ENCODER_KEYS = {"kind": "encoder_kind", "n_blocks": "n_blocks", "n_heads": "n_heads", "d_ff": "d_ff"}
_GRAPH_KEYS = {"layers": "layers", "window": "window"}
_ELSEWHERE = set(_ENCODER_KEYS.values()) | set(_GRAPH_KEYS.values()) | set(ABLATION_FLAGS)


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    hp = HyperParams()
    synth = SyntheticSpec()
    return {
        "data": {
            "events": None,
            "domain_map": None,
            "prepared": None,
            "min_interactions": 10,
            "min_domain_len": 3,
            "split_seed": 0,
        },
        "synth": {f.name: getattr(synth, f.name) for f in fields(SyntheticSpec)} | {"seq_len_range": list(synth.seq_len_range)},
        "graph": {k: getattr(hp, v) for k, v in _GRAPH_KEYS.items()},
        "train": {f.name: getattr(hp, f.name) for f in fields(HyperParams) if f.name not in _ELSEWHERE},
        "encoder": {k: getattr(hp, v) for k, v in _ENCODER_KEYS.items()},
        "ablation": {"variant": "A"} | {flag: False for flag in ABLATION_FLAGS},
        "output": {"dir": "runs/default"},
    }


DEFAULTS = _defaults()


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in (update or {}).items():
        if section not in base:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = value
    return out


class ExperimentConfig:
    """Sections: data, synth, graph, train, encoder, ablation, output.

    Precedence: command-line overrides > config file > built-in defaults.
    """

    def __init__(self, values: dict | None = None):
        self.values = _merge(DEFAULTS, values or {})
        self._validate()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            try:
                raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"config {path} must be a mapping of sections")
        cfg = cls(raw)
        return cfg.override(overrides or {})

    def override(self, dotted: dict) -> "ExperimentConfig":
        """Apply ``{"train.lr": 0.01, ...}``; ``None`` values are skipped."""
        update: dict = {}
        for key, value in dotted.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if not name:
                raise ConfigError(f"override {key!r} must look like section.key")
            update.setdefault(section, {})[name] = value
        merged = _merge(self.values, update)
        return ExperimentConfig(merged)

    def _validate(self) -> None:
        variant = str(self.values["ablation"]["variant"])
        if variant.upper() not in ABLATION_VARIANTS and variant.lower() != "all":
            raise ConfigError(f"unknown ablation variant {variant!r}")
        try:
            self.hyperparams()
            self.synthetic_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def hyperparams(self) -> HyperParams:
        v = self.values
        kw = dict(v["train"])
        kw.update({field: v["encoder"][key] for key, field in _ENCODER_KEYS.items()})
        kw.update({field: v["graph"][key] for key, field in _GRAPH_KEYS.items()})
        hp = HyperParams.from_dict(kw).with_variant(str(v["ablation"]["variant"]))
        extra = {flag: True for flag in ABLATION_FLAGS if v["ablation"][flag]}
        return replace(hp, **extra)

    def synthetic_spec(self) -> SyntheticSpec:
        kw = dict(self.values["synth"])
        kw["seq_len_range"] = tuple(kw["seq_len_range"])
        return SyntheticSpec(**kw)

    def output_dir(self, explicit=None) -> Path:
        """Relative output paths resolve against ``$CDSR_OUTPUT_ROOT`` when it is set."""
        path = Path(explicit if explicit is not None else self.values["output"]["dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return path if path.is_absolute() or not root else Path(root) / path

    def dump(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True)

