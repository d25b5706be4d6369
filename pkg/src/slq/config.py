"""Run configuration: TOML in, fully resolved TOML out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .backbone import BackboneConfig
from .core import DEFAULT_N_QUERIES, PoolingStrategy, QUERY_SWEEP, ReadoutVariant
from .errors import ConfigError, InputError
from .synthdata import KARR_MIX, Dimension, Tier
from .train import TrainerConfig


@dataclass
class PretrainSection:
    steps: int = 1500
    batch_size: int = 32
    text_fraction: float = 0.5
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    n_explicit: int = 4000
    n_reasoning: int = 4000


@dataclass
class DataSection:
    tier: str = "explicit"
    n_train: int = 512
    n_eval: int = 128
    min_objects: int = 1
    max_objects: int = 3
    dimension_mix: dict[str, float] = field(default_factory=lambda: {d.value: p for d, p in KARR_MIX.items()})

    def mix(self) -> dict[Dimension, float]:
        return {Dimension(k): float(v) for k, v in self.dimension_mix.items()}


@dataclass
class ReadoutSection:
    variant: str = ReadoutVariant.SHARED_QUERIES.value
    n_queries: int = DEFAULT_N_QUERIES
    pooling: str = PoolingStrategy.MEAN.value
    query_init: str = "zeros"
    prompt_tokens: list[int] = field(default_factory=list)  # optional instruction prefix, off by default


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    geometry: bool = True
    batch_size: int = 128


@dataclass
class AblateSection:
    axes: list[str] = field(default_factory=lambda: ["query_count", "pooling", "variant"])
    query_counts: list[int] = field(default_factory=lambda: list(QUERY_SWEEP))
    poolings: list[str] = field(default_factory=lambda: [p.value for p in PoolingStrategy])
    variants: list[str] = field(default_factory=lambda: [v.value for v in ReadoutVariant])
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class DiagnoseSection:
    n_per_tier: int = 128


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataSection = field(default_factory=DataSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    readout: ReadoutSection = field(default_factory=ReadoutSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "RunConfig":
        try:
            Tier(self.data.tier)
            ReadoutVariant(self.readout.variant)
            PoolingStrategy(self.readout.pooling)
            self.data.mix()
            for v in self.ablate.variants:
                ReadoutVariant(v)
            for p in self.ablate.poolings:
                PoolingStrategy(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad_axes = set(self.ablate.axes) - {"query_count", "pooling", "variant"}
        if bad_axes:
            raise ConfigError(f"unknown ablation axis {sorted(bad_axes)[0]!r}")
        if self.readout.query_init not in ("zeros", "gaussian"):
            raise ConfigError(f"readout.query_init must be zeros or gaussian, not {self.readout.query_init!r}")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ConfigError("eval.ks must list positive integers")
        # empty datasets are input errors rather than config errors, raised where the data is built
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            sec = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items() if v is not None}
        return out


_SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}


def _build_section(name: str, cls, values: Mapping) -> Any:
    if not isinstance(values, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    kwargs = {}
    for key, val in values.items():
        default = getattr(cls(), key) if key != "dimension_mix" else {}
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"config key '{name}.{key}' must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"config key '{name}.{key}' must be a number")
            if isinstance(default, int) and not float(val).is_integer():
                raise ConfigError(f"config key '{name}.{key}' must be an integer")
            val = type(default)(val)
        if isinstance(default, tuple):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (InputError, TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def config_from_dict(raw: Mapping) -> RunConfig:
    cfg = RunConfig()
    for key, val in raw.items():
        if key == "seed":
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError("config key 'seed' must be an integer")
            cfg.seed = val
        elif key in _SECTIONS:
            setattr(cfg, key, _build_section(key, type(getattr(cfg, key)), val))
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config.toml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
