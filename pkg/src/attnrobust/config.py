"""Declarative experiment configuration (TOML + ``--key=value`` overrides)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adversarial import VARIANTS
from .errors import ConfigError
from .model import SCORE_KINDS

ALL_VARIANTS = ("vanilla",) + VARIANTS
DEFAULT_SEEDS = (13, 21, 42, 87, 100)
DEFAULT_EPSILON_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 30.0)
REDUCTIONS = ("grad_x_input", "grad_l2")

# fields that do not change what a single-seed run computes
_NON_IDENTITY_FIELDS = ("output_dir", "seeds", "report_limit")


@dataclass(frozen=True)
class ExperimentConfig:
    corpus_dir: str
    variant: str = "vanilla"
    epsilon: float = 1.0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    output_dir: str = "runs/default"
    corpus_format: str = "jsonl"
    # model
    embed_dim: int = 100
    hidden_dim: int = 128
    attn_dim: int = 64
    score_kind: str = "additive"
    # data
    min_freq: int = 2
    max_len: int = 64
    valid_fraction: float = 0.1
    # optimization
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    lambda_adv: float = 1.0
    lambda_vat: float = 1.0
    vat_xi: float = 1.0
    vat_power_iters: int = 1
    unlabeled_ratio: int = 1
    divergence_threshold: float = 1e3
    dtype: str = "float32"
    # evaluation
    reduction: str = "grad_x_input"
    report_limit: int = 50

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def identity_hash(self) -> str:
        d = self.to_dict()
        for k in _NON_IDENTITY_FIELDS:
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check(cond, name, msg):
    if not cond:
        raise ConfigError(name, msg)


def validate(cfg: ExperimentConfig) -> None:
    _check(cfg.variant in ALL_VARIANTS, "variant", f"must be one of {', '.join(ALL_VARIANTS)}")
    _check(len(cfg.seeds) > 0, "seeds", "must be a nonempty list")
    _check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "must not repeat")
    _check(cfg.epsilon > 0 or cfg.variant == "vanilla", "epsilon", "must be > 0 for adversarial variants")
    _check(cfg.corpus_format in ("jsonl", "tsv"), "corpus_format", "must be jsonl or tsv")
    _check(cfg.score_kind in SCORE_KINDS, "score_kind", f"must be one of {', '.join(SCORE_KINDS)}")
    _check(cfg.reduction in REDUCTIONS, "reduction", f"must be one of {', '.join(REDUCTIONS)}")
    _check(cfg.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
    for name in ("embed_dim", "hidden_dim", "attn_dim", "min_freq", "max_len", "batch_size",
                 "max_epochs", "patience", "vat_power_iters", "unlabeled_ratio"):
        _check(getattr(cfg, name) >= 1, name, "must be >= 1")
    for name in ("lr", "vat_xi", "divergence_threshold"):
        _check(getattr(cfg, name) > 0, name, "must be > 0")
    for name in ("lambda_adv", "lambda_vat"):
        _check(getattr(cfg, name) >= 0, name, "must be >= 0")
    _check(0 < cfg.valid_fraction < 1, "valid_fraction", "must be in (0, 1)")
    _check(cfg.report_limit >= 0, "report_limit", "must be >= 0")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name, value):
    default = _FIELDS[name].default
    try:
        if name == "seeds":
            if isinstance(value, str):
                value = [v for v in value.replace("[", "").replace("]", "").split(",") if v.strip()]
            return tuple(int(v) for v in value)
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r}") from None


def _parse_override(text: str):
    key, sep, raw = text[2:].partition("=")
    if not (text.startswith("--") and sep and key):
        raise ConfigError(text, "override must look like --key=value")
    key = key.replace("-", "_")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def config_from_mapping(values: dict, base_dir: Path | None = None) -> ExperimentConfig:
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown configuration field")
        kwargs[key] = _coerce(key, value)
    if "corpus_dir" not in kwargs:
        raise ConfigError("corpus_dir", "is required")
    if base_dir is not None:
        for key in ("corpus_dir", "output_dir"):
            if key in kwargs and not Path(kwargs[key]).is_absolute():
                kwargs[key] = str((base_dir / kwargs[key]).resolve())
    return ExperimentConfig(**kwargs)


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a TOML config; relative paths in the file resolve against the
    file's folder, relative paths in overrides against the working directory.

    ``overrides`` are ``--key=value`` strings whose values use TOML literal
    syntax (bare words fall back to strings).
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"{path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    base = path.parent.resolve()
    for key in ("corpus_dir", "output_dir"):
        if isinstance(values.get(key), str) and not Path(values[key]).is_absolute():
            values[key] = str(base / values[key])
    for text in overrides:
        key, value = _parse_override(text)
        values[key] = value
    return config_from_mapping(values, base_dir=Path.cwd())
