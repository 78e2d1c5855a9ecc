"""Run configuration: one YAML file, ``section.key=value`` overrides, a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .pipeline import TrainConfig, WorldConfig

FACTORS = ("speaker", "background", "content")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    factors: tuple[str, ...] = FACTORS
    n_pairs: int = 200
    pair_length: int = 100
    pair_seed: int = 999
    n_boot: int = 10_000
    boot_seed: int = 0
    ablate_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    probe_n: int = 200
    probe_seed: int = 555
    probe_split_seed: int = 0
    stages: tuple[float, ...] = (0.1, 0.4, 1.0)


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(ckpt_every=200))
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> "RunConfig":
        bad = [f for f in self.eval.factors if f not in FACTORS]
        if bad:
            raise ConfigError(f"eval.factors: unknown factor(s) {bad}; choose from {FACTORS}")
        for k, v in (("eval.n_pairs", self.eval.n_pairs), ("train.steps", self.train.steps),
                     ("world.n_train", self.world.n_train), ("train.batch_size", self.train.batch_size)):
            if v < 1:
                raise ConfigError(f"{k} must be >= 1, got {v}")
        if not 0 <= self.train.interleave_prob <= 1:
            raise ConfigError("train.interleave_prob must lie in [0, 1]")
        if self.world.max_len + 2 > self.train.max_seq_len:
            raise ConfigError("train.max_seq_len must exceed world.max_len + 2 (delimiter and eos)")
        return self


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def config_hash(d: dict) -> str:
    blob = json.dumps(_plain(d), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _coerce(hints[k], v, f"{where}.{k}" if where else k)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def _coerce(tp, v, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, v, where)
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        elem = args[0] if args else object
        return tuple(_coerce(elem, x, where) for x in v)
    if origin in (typing.Union, types.UnionType):
        if v is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], v, where)
    if tp is float and isinstance(v, int) and not isinstance(v, bool):
        return float(v)
    if tp is float and isinstance(v, str):
        # YAML 1.1 reads exponent forms like 1e-3 as strings
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{where}: expected float, got {v!r}") from None
    if tp in (int, float, str, bool) and not isinstance(v, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {v!r}")
    if tp is int and isinstance(v, bool):
        raise ConfigError(f"{where}: expected int, got {v!r}")
    return v


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d or {}, "").validate()


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings (value parsed as YAML) to a nested dict."""
    d = json.loads(json.dumps(_plain(d)))
    for ov in overrides or ():
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form section.key=value")
        key, raw = ov.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: no section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        try:
            node[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"override {key!r}: cannot parse {raw!r}") from e
    return d


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    base = RunConfig().to_dict()
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        base = _merge(base, user, "")
    return from_dict(apply_overrides(base, overrides))


def _merge(base: dict, user: dict, where: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    out = dict(base)
    for k, v in user.items():
        if k not in base:
            raise ConfigError(f"{where + '.' if where else ''}{k}: unknown key")
        out[k] = _merge(base[k], v, f"{where}.{k}" if where else k) if isinstance(base[k], dict) else v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
