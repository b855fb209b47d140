"""Run configuration: a YAML file of sections, plus ``section.key=value`` overrides.

Sections: ``data``, ``train``, ``eval``, ``ablation``. Unknown keys are rejected
with the closest valid key suggested.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from hazemeta import ConfigError
from hazemeta.datagen import DomainSpec, default_domains
from hazemeta.evaluate import ABLATION_VARIANTS
from hazemeta.trainer import TrainConfig

SEED_ENV = "HAZEMETA_SEED"


@dataclass
class DataConfig:
    domains: list = field(default_factory=lambda: [d.to_dict() for d in default_domains()])
    heldout_domains: list = field(default_factory=lambda: [2])
    synth_n_per_domain: int = 32
    synth_size: int = 80

    def domain_specs(self) -> list[DomainSpec]:
        return [DomainSpec.from_dict(d) for d in self.domains]


@dataclass
class EvalConfig:
    n_images: int = 16
    context_k: int = 4
    image_size: int = 64
    seed: int = 0
    dark_channel_patch: int = 15
    domains: list | None = None  # None: every configured domain


@dataclass
class AblationConfig:
    variants: list = field(default_factory=lambda: [v.name for v in ABLATION_VARIANTS])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    max_steps: int | None = None  # None: use train.max_steps


SECTIONS = {"data": DataConfig, "train": TrainConfig, "eval": EvalConfig, "ablation": AblationConfig}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def valid_keys() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]


def _unknown(key: str) -> ConfigError:
    near = difflib.get_close_matches(key, valid_keys(), n=1, cutoff=0.5)
    hint = f"; did you mean {near[0]!r}?" if near else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def _coerce(key: str, value: Any, default: Any):
    """Check ``value`` against the type of the field's default."""
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, list):
            return value
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def _apply(cfg: RunConfig, section: str, key: str, value: Any) -> None:
    full = f"{section}.{key}"
    if section not in SECTIONS:
        raise _unknown(full)
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise _unknown(full)
    default = getattr(SECTIONS[section](), key)
    setattr(obj, key, _coerce(full, value, default))


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from exc


def parse_override(text: str) -> tuple[str, str, Any]:
    text = text[2:] if text.startswith("--") else text
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    if "." not in key:
        raise _unknown(key)
    section, name = key.split(".", 1)
    return section, name, _parse_value(raw)


def validate(cfg: RunConfig) -> RunConfig:
    try:
        specs = cfg.data.domain_specs()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"data.domains: {exc}") from exc
    ids = [d.id for d in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("data.domains: domain ids must be unique")
    for key, group in (("train.train_domains", cfg.train.train_domains), ("data.heldout_domains", cfg.data.heldout_domains)):
        missing = [i for i in group if i not in ids]
        if missing:
            raise ConfigError(f"{key}: unknown domain ids {missing}")
    overlap = set(cfg.train.train_domains) & set(cfg.data.heldout_domains)
    if overlap:
        raise ConfigError(f"data.heldout_domains: {sorted(overlap)} also used for training")
    known = {v.name for v in ABLATION_VARIANTS}
    bad = [v for v in cfg.ablation.variants if v not in known]
    if bad:
        raise ConfigError(f"ablation.variants: unknown {bad}; choose from {sorted(known)}")
    if cfg.eval.n_images < 1:
        raise ConfigError("eval.n_images: must be >= 1")
    if cfg.eval.context_k < 1:
        raise ConfigError("eval.context_k: must be >= 1")
    if cfg.eval.dark_channel_patch < 1 or cfg.eval.dark_channel_patch % 2 == 0:
        raise ConfigError("eval.dark_channel_patch: must be odd and >= 1")
    cfg.train.validate()
    return cfg


def parse_config(path=None, overrides: Sequence[str] = (), env=None) -> RunConfig:
    """Defaults < file < $HAZEMETA_SEED < overrides, then validated."""
    cfg = RunConfig()
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        for section, body in raw.items():
            if section not in SECTIONS:
                raise _unknown(str(section))
            if body is None:
                continue
            if not isinstance(body, dict):
                raise ConfigError(f"{section}: must be a mapping")
            for key, value in body.items():
                _apply(cfg, section, str(key), value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.train.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    for text in overrides:
        _apply(cfg, *parse_override(text))
    return validate(cfg)
