"""Run configuration: flat ``section.key = value`` text mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .evalharness import SyntheticTaskSpec
from .grpo import GrpoConfig
from .policy import EncoderConfig
from .ppobaseline import GaeConfig
from .rewards import RewardWeights

OUTPUT_ENV = "CTFG_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    name: str = "synthetic"  # used in report file names
    path: str = ""  # recordings file or directory; empty selects the synthetic task
    schema: str = ""  # schema descriptor for ``path``
    groups: str = ""  # "A:1,2;B:3,4"; overrides schema/synthetic groups when set
    holdout: str = "D"
    window_len: int = 75
    overlap: float = 0.5
    synth_seed: int = 0


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    ff_width: int = 256
    token_dim: int = 16
    init_log_sigma: float = 0.0

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.n_heads, self.n_layers, self.ff_width)


@dataclass
class TrainConfig:
    optimizer: str = "grpo"
    seed: int = 0
    lr: float = 1e-4
    proj_lr: float = 1e-3
    samples_per_cell: int = 2
    l2: float = 1e-3
    probe_interval: int = 5
    checkpoint_interval: int = 0
    checked: bool = True

    def __post_init__(self):
        if self.optimizer not in ("grpo", "ppo"):
            raise ValueError(f"optimizer must be grpo or ppo, got {self.optimizer!r}")


@dataclass
class OutputConfig:
    dir: str = ""

    def resolve(self) -> Path:
        return Path(self.dir or os.environ.get(OUTPUT_ENV, "runs"))


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    gae: GaeConfig = field(default_factory=GaeConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def synthetic(self) -> bool:
        return not self.data.path

    def keys(self) -> dict[str, object]:
        """Every ``section.key`` with its current value."""
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.keys().items())

    def with_overrides(self, overrides: dict[str, str]) -> RunConfig:
        """New config with string-valued overrides applied and validated."""
        sections = {sec.name: dataclasses.asdict(getattr(self, sec.name)) for sec in dataclasses.fields(self)}
        defaults = self.keys()
        for key, raw in overrides.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            sec, name = key.split(".", 1)
            sections[sec][name] = _parse(raw, defaults[key], key)
        try:
            return RunConfig(**{sec.name: type(getattr(self, sec.name))(**sections[sec.name])
                                for sec in dataclasses.fields(self)})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError:
            raise ConfigError(f"cannot read config file {p}") from None
        values.update(parse_config_text(text, str(p)))
    values.update(overrides or {})
    return RunConfig().with_overrides(values)
