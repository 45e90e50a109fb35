"""Run configuration: a versioned JSON document validated against a schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .channel import ChannelConfig
from .container import canonical_hash
from .errors import ConfigError
from .learngene import ExtractionPolicy
from .sdnet import TrainConfig

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "lgdetect run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "master_seed": {"type": "integer", "minimum": 0},
        "nt": _pos_int,
        "nr": _pos_int,
        "n_pilots": _pos_int,
        "n_clusters": _pos_int,
        "rays_per_cluster": _pos_int,
        "angular_spread_deg": {"type": "number", "minimum": 0},
        "snr_db": _num,
        "snr_grid": {"type": "array", "items": _num},
        "n_collective_tasks": _pos_int,
        "n_target_tasks": _pos_int,
        "samples_per_task": {"type": "integer", "minimum": 10},
        "n_conv_collective": _pos_int,
        "n_conv_individual": _pos_int,
        "collective_epochs": {"type": "integer", "minimum": 0},
        "individual_epochs": {"type": "integer", "minimum": 0},
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "lam": {"type": "number", "minimum": 0},
        "scale_inputs": {"type": "boolean"},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "rho_sel": {"type": "number", "minimum": 0, "maximum": 1},
        "window": {"type": ["integer", "null"], "minimum": 1},
        "m_max": _pos_int,
        "schemes": {"type": "array", "items": {"type": "string", "pattern": "^(scratch|transfer|learngene(:[a-z/_-]+)?)$"}},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "transfer_source": {"type": ["integer", "null"], "minimum": 0},
        "workers": {"type": ["integer", "null"], "minimum": 1},
        "out_dir": {"type": "string"},
        "data_dir": {"type": ["string", "null"]},
    },
}


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    master_seed: int = 0
    nt: int = 8
    nr: int = 32
    n_pilots: int = 16
    n_clusters: int = 6
    rays_per_cluster: int = 20
    angular_spread_deg: float = 5.0
    snr_db: float = 25.0
    snr_grid: list[float] = field(default_factory=lambda: [20.0, 22.5, 25.0, 27.5, 30.0])
    n_collective_tasks: int = 8
    n_target_tasks: int = 2
    samples_per_task: int = 2000
    n_conv_collective: int = 12
    n_conv_individual: int = 8
    collective_epochs: int = 30
    individual_epochs: int = 120
    batch_size: int = 500
    lr: float = 1e-3
    lam: float = 2e-15
    scale_inputs: bool = True
    tau: float = 1e-4
    rho_sel: float = 0.05
    window: int | None = None
    m_max: int = 4
    schemes: list[str] = field(default_factory=lambda: ["scratch", "transfer", "learngene:bottom"])
    seeds: list[int] = field(default_factory=lambda: [0])
    transfer_source: int | None = None
    workers: int | None = None
    out_dir: str = "runs/default"
    data_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        cfg = cls(**d)
        if cfg.n_conv_collective <= cfg.n_conv_individual:
            raise ConfigError("n_conv_collective must exceed n_conv_individual")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config must be a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # paths and worker count do not change results
        d = {k: v for k, v in self.to_dict().items() if k not in ("out_dir", "data_dir", "workers")}
        return canonical_hash(d)

    def channel(self) -> ChannelConfig:
        return ChannelConfig(
            nt=self.nt,
            nr=self.nr,
            n_pilots=self.n_pilots,
            n_clusters=self.n_clusters,
            rays_per_cluster=self.rays_per_cluster,
            angular_spread_deg=self.angular_spread_deg,
        )

    def collective_train(self) -> TrainConfig:
        return TrainConfig(self.collective_epochs, self.batch_size, self.lr, self.lam, self.master_seed, self.scale_inputs)

    def individual_train(self) -> TrainConfig:
        return TrainConfig(self.individual_epochs, self.batch_size, self.lr, self.lam, self.master_seed, self.scale_inputs)

    def policy(self) -> ExtractionPolicy:
        return ExtractionPolicy(self.tau, self.window, self.rho_sel, self.m_max)

    def collective_ids(self) -> list[int]:
        return list(range(self.n_collective_tasks))

    def target_ids(self) -> list[int]:
        k = self.n_collective_tasks
        return list(range(k, k + self.n_target_tasks))

    def header(self) -> dict:
        return {"config_hash": self.config_hash(), "master_seed": self.master_seed}


def field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
