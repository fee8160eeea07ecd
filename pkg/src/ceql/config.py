"""Declarative run configuration, persisted as YAML."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidConfig
from .graph import InitPolicy, LayerSpec, default_library
from .train import PhaseSchedule, default_schedule

ENV_VAR = "CEQL_DEFAULT_CONFIG"


@dataclass
class RunConfig:
    schedule: PhaseSchedule = field(default_factory=default_schedule)
    library: str = "as_printed"
    init: InitPolicy = field(default_factory=InitPolicy)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    benchmarks: list[str] = field(default_factory=lambda: [f"E-{i}" for i in range(1, 11)])
    data: list[str] = field(default_factory=list)
    out_dir: str = "runs"
    scale: float = 1.0
    engine: str = "auto"
    n_train: int = 128
    n_test: int = 8192

    def layers(self) -> list[LayerSpec]:
        return default_library(self.library)

    def effective_schedule(self) -> PhaseSchedule:
        return self.schedule.scaled(self.scale) if self.scale != 1.0 else self.schedule

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "library": self.library,
            "layers": [s.to_dict() for s in self.layers()],
            "init": self.init.to_dict(),
            "seeds": list(self.seeds),
            "benchmarks": list(self.benchmarks),
            "data": list(self.data),
            "out_dir": self.out_dir,
            "scale": self.scale,
            "engine": self.engine,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {"schedule", "library", "layers", "init", "seeds", "benchmarks", "data",
                 "out_dir", "scale", "engine", "n_train", "n_test"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        if "schedule" in d:
            cfg.schedule = PhaseSchedule.from_dict(d["schedule"])
        if "init" in d:
            cfg.init = InitPolicy(**d["init"])
        for key in ("library", "out_dir", "engine"):
            if key in d:
                setattr(cfg, key, str(d[key]))
        for key in ("seeds", "benchmarks", "data"):
            if key in d:
                setattr(cfg, key, list(d[key]))
        if "scale" in d:
            cfg.scale = float(d["scale"])
        for key in ("n_train", "n_test"):
            if key in d:
                setattr(cfg, key, int(d[key]))
        cfg.layers()  # rejects unknown library names early
        if "layers" in d and [LayerSpec.from_dict(s) for s in d["layers"]] != cfg.layers():
            raise InvalidConfig("layers do not match the named library")
        return cfg

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.dump())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise InvalidConfig(f"{path}: expected a mapping at top level")
        try:
            return cls.from_dict(raw)
        except (TypeError, ValueError, KeyError) as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc


def load_config(path=None) -> RunConfig:
    """Explicit path, else ``$CEQL_DEFAULT_CONFIG``, else built-in defaults."""
    path = path or os.environ.get(ENV_VAR)
    return RunConfig.load(path) if path else RunConfig()
