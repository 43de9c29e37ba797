"""Run configuration: one JSON file with fixed sections, unknown keys rejected."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataConfig, check_feasible
from .module import IGCConfig


class ConfigError(ValueError):
    pass


@dataclass
class HostConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    ctx: int = 32
    seed: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    warmup: int = 100
    clip_norm: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 3e-3
    table_lr_scale: float = 10.0
    warmup: int = 50
    schedule: str = "cosine"
    clip_norm: float = 5.0
    lambda_aux: float = 1.0
    lambda_gate: float = 1.0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_every: int = 1
    eval_limit: int = 400


SECTIONS = {"data": DataConfig, "host": HostConfig, "igc": IGCConfig,
            "pretrain": PretrainConfig, "train": TrainConfig}
TUPLE_KEYS = {("data", "op_weights"), ("data", "filter_ngrams")}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    host: HostConfig = field(default_factory=HostConfig)
    igc: IGCConfig = field(default_factory=IGCConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def digest(self, *sections):
        """Content hash of the named sections (all when none given)."""
        d = self.to_dict()
        keep = {k: d[k] for k in (sections or SECTIONS)}
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}; expected {sorted(SECTIONS)}")
        built = {}
        for name, kind in SECTIONS.items():
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(kind)}
            bad = set(sec) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}; allowed: {sorted(known)}")
            vals = {k: tuple(v) if (name, k) in TUPLE_KEYS else v for k, v in sec.items()}
            try:
                built[name] = kind(**vals)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{name}]: {e}") from e
        cfg = cls(**built)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def validate(self):
        try:
            check_feasible(self.data)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.igc.width != self.data.width:
            raise ConfigError(f"igc.width={self.igc.width} differs from data.width={self.data.width}")
        if self.host.d_model % self.host.n_heads:
            raise ConfigError("host.d_model must be divisible by host.n_heads")
        if not 1 <= self.igc.insertion_layer <= self.host.n_layers:
            raise ConfigError(f"igc.insertion_layer must lie in 1..{self.host.n_layers}")
        if self.train.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.train.schedule!r}; expected constant or cosine")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.train.optimizer!r}")
        if not self.train.seeds:
            raise ConfigError("train.seeds must list at least one seed")

    def with_overrides(self, **sections):
        """Copy with ``section={key: value}`` updates applied."""
        d = self.to_dict()
        for name, upd in sections.items():
            d[name].update(upd)
        return RunConfig.from_dict(d)
