"""Run configuration: defaults, validation, file loading, round-tripping."""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

METHODS = (
    "local",
    "fedavg",
    "fedprox",
    "fedc2i",
    "fedc2i_lambda",
    "fedc2i_matrix_local",
    "fedc2i_matrix_global",
)
DEFAULT_GAMMA_SWEEP = (0.5, 1.0, 2.0, 5.0, 10.0)


def normalize_method(name) -> str:
    key = str(name).strip().lower().replace("-", "_")
    aliases = {
        "fedc2i_l": "fedc2i_lambda",
        "fedc2i_matrix_l": "fedc2i_matrix_local",
        "fedc2i_matrix_g": "fedc2i_matrix_global",
    }
    key = aliases.get(key, key)
    if key not in METHODS:
        raise ConfigError(f"method: unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return key


@dataclass(frozen=True)
class DataConfig:
    latent_dim: int = 8
    feature_dim: int = 32
    noise: float = 1.2
    perturbation: float = 0.1
    class_sep: float = 1.0
    offset_scale: float = 0.0
    train_per_class: int = 100
    test_per_class: int = 100
    groups: tuple[tuple[int, ...], ...] = ((0, 1), (2, 3, 4))
    seed: int | None = None


@dataclass(frozen=True)
class RunConfig:
    method: str = "fedc2i"
    clients: int = 5
    classes: int = 10
    gamma: float = 5.0
    mu: float = 0.01
    rounds: int = 20
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "tanh"
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    literal_eq10: bool = False
    reset_optimizer: bool = False
    holdout: bool = False
    checkpoint: bool = False
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, **changes) -> RunConfig:
        data_changes = changes.pop("data", None)
        cfg = dataclasses.replace(self, **changes)
        if data_changes:
            cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **data_changes))
        return validate(cfg)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        out["seeds"] = list(self.seeds)
        out["data"]["groups"] = [list(g) for g in self.data.groups]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` as a float (YAML 1.1 needs a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _require(cond, key, message):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _as_int(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return int(value)


def _as_float(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite")
    return value


def _as_bool(key, value):
    if not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    return value


def validate(cfg: RunConfig) -> RunConfig:
    """Coerce types and check domains; returns a normalized copy."""
    d = cfg.data
    try:
        groups = tuple(tuple(_as_int("data.groups", i) for i in g) for g in d.groups)
    except TypeError:
        raise ConfigError(f"data.groups: expected a list of lists, got {d.groups!r}") from None
    data = DataConfig(
        latent_dim=_as_int("data.latent_dim", d.latent_dim),
        feature_dim=_as_int("data.feature_dim", d.feature_dim),
        noise=_as_float("data.noise", d.noise),
        perturbation=_as_float("data.perturbation", d.perturbation),
        class_sep=_as_float("data.class_sep", d.class_sep),
        offset_scale=_as_float("data.offset_scale", d.offset_scale),
        train_per_class=_as_int("data.train_per_class", d.train_per_class),
        test_per_class=_as_int("data.test_per_class", d.test_per_class),
        groups=groups,
        seed=None if d.seed is None else _as_int("data.seed", d.seed),
    )
    if isinstance(cfg.seeds, (int, float)):
        raise ConfigError("seeds: expected a list of integers")
    out = RunConfig(
        method=normalize_method(cfg.method),
        clients=_as_int("clients", cfg.clients),
        classes=_as_int("classes", cfg.classes),
        gamma=_as_float("gamma", cfg.gamma),
        mu=_as_float("mu", cfg.mu),
        rounds=_as_int("rounds", cfg.rounds),
        local_epochs=_as_int("local_epochs", cfg.local_epochs),
        batch_size=_as_int("batch_size", cfg.batch_size),
        lr=_as_float("lr", cfg.lr),
        beta1=_as_float("beta1", cfg.beta1),
        beta2=_as_float("beta2", cfg.beta2),
        eps=_as_float("eps", cfg.eps),
        hidden=tuple(_as_int("hidden", h) for h in cfg.hidden),
        activation=str(cfg.activation),
        seeds=tuple(_as_int("seeds", s) for s in cfg.seeds),
        out_dir=str(cfg.out_dir),
        literal_eq10=_as_bool("literal_eq10", cfg.literal_eq10),
        reset_optimizer=_as_bool("reset_optimizer", cfg.reset_optimizer),
        holdout=_as_bool("holdout", cfg.holdout),
        checkpoint=_as_bool("checkpoint", cfg.checkpoint),
        threads=_as_int("threads", cfg.threads),
        data=data,
    )
    _require(out.gamma >= 0, "gamma", f"must be >= 0, got {out.gamma}")
    _require(out.mu >= 0, "mu", f"must be >= 0, got {out.mu}")
    _require(out.clients >= 1, "clients", "must be >= 1")
    _require(out.classes >= 2, "classes", "must be >= 2")
    _require(out.rounds >= 0, "rounds", "must be >= 0")
    _require(out.local_epochs >= 0, "local_epochs", "must be >= 0")
    _require(out.batch_size >= 1, "batch_size", "must be >= 1")
    _require(out.lr > 0, "lr", "must be > 0")
    _require(0 <= out.beta1 < 1, "beta1", "must lie in [0, 1)")
    _require(0 <= out.beta2 < 1, "beta2", "must lie in [0, 1)")
    _require(out.eps > 0, "eps", "must be > 0")
    _require(all(h >= 1 for h in out.hidden), "hidden", "widths must be >= 1")
    _require(out.activation in ("tanh", "relu"), "activation", "must be 'tanh' or 'relu'")
    _require(len(out.seeds) >= 1, "seeds", "need at least one seed")
    _require(out.threads >= 1, "threads", "must be >= 1")
    _require(data.latent_dim >= 1, "data.latent_dim", "must be >= 1")
    _require(
        data.feature_dim >= data.latent_dim,
        "data.feature_dim",
        f"must be >= data.latent_dim ({data.latent_dim})",
    )
    _require(data.noise > 0, "data.noise", "must be > 0")
    _require(data.perturbation >= 0, "data.perturbation", "must be >= 0")
    _require(data.train_per_class >= 1, "data.train_per_class", "must be >= 1")
    _require(data.test_per_class >= 1, "data.test_per_class", "must be >= 1")
    members = sorted(i for g in groups for i in g)
    _require(
        members == list(range(out.clients)),
        "data.groups",
        f"must partition clients 0..{out.clients - 1}, got {[list(g) for g in groups]}",
    )
    return out


def from_dict(raw: dict) -> RunConfig:
    """Build a config from a (possibly partial) mapping; unknown keys are rejected."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    raw = dict(raw)
    unknown = set(raw) - _field_names(RunConfig)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
    data_raw = raw.pop("data", None) or {}
    if not isinstance(data_raw, dict):
        raise ConfigError("data: expected a mapping")
    unknown = set(data_raw) - _field_names(DataConfig)
    if unknown:
        raise ConfigError(f"data.{sorted(unknown)[0]}: unknown config key")
    if "clients" in raw and "groups" not in data_raw and raw["clients"] != RunConfig.clients:
        # one group per client unless told otherwise
        data_raw["groups"] = [[i] for i in range(_as_int("clients", raw["clients"]))]
    if "hidden" in raw and not isinstance(raw["hidden"], (list, tuple)):
        raise ConfigError("hidden: expected a list of widths")
    base = RunConfig()
    return validate(
        dataclasses.replace(base, **raw, data=dataclasses.replace(base.data, **data_raw))
    )


def parse_config(path=None, overrides=None) -> RunConfig:
    """Load a YAML/JSON config file (or nothing) and apply flag overrides on top."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            text = path.read_text()
            raw = json.loads(text) if path.suffix == ".json" else yaml.load(text, Loader=_Loader)
            raw = raw or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot parse: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("data."):
            raw.setdefault("data", {})[key[5:]] = value
        else:
            raw[key] = value
    return from_dict(raw)
