"""Run configuration: one YAML file per run, validated section by section.

Top-level sections and their keys::

    data:      source (synth|csv), prices, universe, subset, vol_span, synth
    model:     PolicyConfig fields except n_features / n_assets
    loss:      LossConfig fields
    train:     TrainConfig fields
    ensemble:  n_seeds, top_k
    split:     block_years, val_frac
    costs:     floor_bps, synthetic_bps, use_final_column
    baselines: kinds, base, ridge, kappa, sigma_tgt
    ablate:    list of {name, model, loss, train, ensemble} overrides
    seeds:     optional explicit seed list (defaults to range(n_seeds))
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .baselines import KINDS, BaselineConfig
from .data import SynthSpec
from .model import PolicyConfig
from .objective import LossConfig
from .training import EnsembleSpec, TrainConfig


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, valid) -> None:
    unknown = sorted(set(given) - set(valid))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section '{section}'; valid keys: {sorted(valid)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


MODEL_KEYS = [k for k in _field_names(PolicyConfig) if k not in ("n_features", "n_assets")]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    prices: str | None = None
    universe: str | None = None
    subset: str = "SignalBased"
    vol_span: int = 63
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synth", "csv"):
            raise ConfigError("data.source must be 'synth' or 'csv'")
        if self.source == "csv" and not self.prices:
            raise ConfigError("data.prices is required when data.source is 'csv'")
        _check_keys("data.synth", self.synth, _field_names(SynthSpec))

    def synth_spec(self) -> SynthSpec:
        return SynthSpec.from_dict(self.synth)


@dataclass(frozen=True)
class SplitConfig:
    block_years: int = 5
    val_frac: float = 0.1


@dataclass(frozen=True)
class CostConfig:
    floor_bps: float = 0.25
    synthetic_bps: float = 1.0
    use_final_column: bool = True


@dataclass(frozen=True)
class BaselineSet:
    kinds: tuple[str, ...] = ("passive", "tsmom", "macd", "mvo_tp")
    base: str = "tsmom"
    ridge: float = 1.0
    kappa: float = 10.0
    sigma_tgt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            if k not in KINDS:
                raise ConfigError(f"unknown baseline {k!r}; valid: {list(KINDS)}")

    def config(self, kind: str) -> BaselineConfig:
        return BaselineConfig(kind=kind, base=self.base, ridge=self.ridge, kappa=self.kappa, sigma_tgt=self.sigma_tgt)


ABLATION_KEYS = ("name", "model", "loss", "train", "ensemble")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    costs: CostConfig = field(default_factory=CostConfig)
    baselines: BaselineSet = field(default_factory=BaselineSet)
    ablate: tuple[dict, ...] = ()
    seeds: tuple[int, ...] | None = None

    def policy(self, n_features: int, n_assets: int, **overrides) -> PolicyConfig:
        return PolicyConfig(n_features=n_features, n_assets=n_assets, **{**self.model, **overrides})

    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.ensemble.n_seeds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = [dict(r) for r in self.ablate]
        d["seeds"] = None if self.seeds is None else list(self.seeds)
        d["baselines"]["kinds"] = list(self.baselines.kinds)
        return _plain(d)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_row(self, row: dict) -> "RunConfig":
        """Apply one ablation row's overrides."""
        _check_keys("ablate row", row, ABLATION_KEYS)
        cfg = self
        if "model" in row:
            cfg = replace(cfg, model={**cfg.model, **row["model"]})
            _validate_model(cfg.model)
        if "loss" in row:
            cfg = replace(cfg, loss=_build("loss", LossConfig, {**asdict(cfg.loss), **row["loss"]}))
        if "train" in row:
            cfg = replace(cfg, train=_build("train", TrainConfig, {**asdict(cfg.train), **row["train"]}))
        if "ensemble" in row:
            cfg = replace(cfg, ensemble=_build("ensemble", EnsembleSpec, {**asdict(cfg.ensemble), **row["ensemble"]}))
        return cfg


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def config_hash(d: dict) -> str:
    blob = json.dumps(_plain(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(section: str, cls, d: dict):
    _check_keys(section, d, _field_names(cls))
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def _validate_model(d: dict) -> None:
    _check_keys("model", d, MODEL_KEYS)
    try:
        PolicyConfig(n_features=1, n_assets=1, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section 'model': {exc}") from exc


SECTIONS = ("data", "model", "loss", "train", "ensemble", "split", "costs", "baselines", "ablate", "seeds")


def parse_config(raw: dict | None, paper_scale: bool = False) -> RunConfig:
    """Validate a nested dict; unknown keys anywhere raise :class:`ConfigError`.

    ``paper_scale`` swaps the desk-scale training, ensemble and model defaults
    for the published ones before the file's own values are applied.
    """
    raw = dict(raw or {})
    _check_keys("<top level>", raw, SECTIONS)
    train_base = asdict(TrainConfig.paper_scale() if paper_scale else TrainConfig())
    ens_base = asdict(EnsembleSpec.paper_scale() if paper_scale else EnsembleSpec())
    model = dict(PAPER_MODEL if paper_scale else DESK_MODEL)
    model.update(raw.get("model") or {})
    _validate_model(model)
    ablate = tuple(dict(r) for r in (raw.get("ablate") or ()))
    for r in ablate:
        _check_keys("ablate row", r, ABLATION_KEYS)
        if "name" not in r:
            raise ConfigError("every ablate row needs a name")
    seeds = raw.get("seeds")
    cfg = RunConfig(
        data=_build("data", DataConfig, raw.get("data") or {}),
        model=model,
        loss=_build("loss", LossConfig, raw.get("loss") or {}),
        train=_build("train", TrainConfig, {**train_base, **(raw.get("train") or {})}),
        ensemble=_build("ensemble", EnsembleSpec, {**ens_base, **(raw.get("ensemble") or {})}),
        split=_build("split", SplitConfig, raw.get("split") or {}),
        costs=_build("costs", CostConfig, raw.get("costs") or {}),
        baselines=_build("baselines", BaselineSet, raw.get("baselines") or {}),
        ablate=ablate,
        seeds=None if seeds is None else tuple(int(s) for s in seeds),
    )
    for r in ablate:
        cfg.with_row(r)
    return cfg


def load_config(path: str | Path | None, paper_scale: bool = False) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    return parse_config(raw, paper_scale)


DESK_MODEL = dict(d_model=16, heads=2, dropout=0.3)
PAPER_MODEL = dict(d_model=64, heads=4, dropout=0.3)
