"""Merged run configuration: CLI flags over DPASTORE_* env vars over a JSON file over defaults."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .costmodel import BF3, LatencyConstants
from .engine import DEFAULT_BUFFER_CAPACITY, RECEIVE_QUEUE_DEPTH, EngineConfig
from .pla import EpsilonConfig
from .store import StoreConfig
from .workload import DATASET_KINDS, MIXES

ENV_PREFIX = "DPASTORE_"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str) -> None:
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


def default_threads() -> int:
    return min(176, 8 * (os.cpu_count() or 1))


@dataclass
class Config:
    # server side
    threads: int = field(default_factory=default_threads)
    host: str = "127.0.0.1"
    base_port: int = 7000
    dataset: str = "sparse"
    n: int = 1_000_000
    seed: int = 0
    bulk_load: bool = False
    eps_inner: int = 4
    eps_leaf: int = 8
    infinite_mode: bool = False
    cache: bool = True
    latency_model: str = "off"
    instrument: bool = True
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY
    partitions: int = 4
    patchers: int = 4
    stitch_capacity: int = 4096
    command_latency_us: float = 0.0
    retrain_bound_fraction: float = 0.25
    queue_depth: int = RECEIVE_QUEUE_DEPTH
    drop_rate: float = 0.0
    # client / bench side
    workload: str = "c"
    alpha: float = 0.99
    uniform: bool = False
    ops: int = 100_000
    duration: float = 0.0
    workers: int = 4
    qd_get: int = 32
    qd_write: int = 18
    out: str = ""
    format: str = "json"

    def validate(self) -> "Config":
        positive = ("threads", "n", "buffer_capacity", "partitions", "patchers", "stitch_capacity",
                    "queue_depth", "workers", "qd_get", "qd_write")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if not self.infinite_mode:
            for name in ("eps_inner", "eps_leaf"):
                if getattr(self, name) < 1:
                    raise ConfigError(name, f"must be >= 1 unless infinite_mode, got {getattr(self, name)}")
        if not 0 <= self.base_port <= 65535 - self.threads:
            raise ConfigError("base_port", f"{self.base_port} leaves no room for {self.threads} ports")
        if not (self.dataset in DATASET_KINDS or self.dataset.startswith("sosd:")):
            raise ConfigError("dataset", f"expected one of {DATASET_KINDS} or sosd:<path>, got {self.dataset!r}")
        if not (self.latency_model in ("off", "bf3") or self.latency_model.startswith("custom:")):
            raise ConfigError("latency_model", f"expected off, bf3 or custom:<file>, got {self.latency_model!r}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate", f"must lie in [0, 1), got {self.drop_rate}")
        if not 0.0 < self.retrain_bound_fraction <= 1.0:
            raise ConfigError("retrain_bound_fraction", f"must lie in (0, 1], got {self.retrain_bound_fraction}")
        if self.workload not in MIXES:
            raise ConfigError("workload", f"expected one of {sorted(MIXES)}, got {self.workload!r}")
        if self.alpha < 0:
            raise ConfigError("alpha", f"must be >= 0, got {self.alpha}")
        if self.format not in ("json", "csv"):
            raise ConfigError("format", f"expected json or csv, got {self.format!r}")
        if self.command_latency_us < 0 or self.duration < 0:
            raise ConfigError("duration" if self.duration < 0 else "command_latency_us", "must be >= 0")
        return self

    def latency(self) -> tuple[LatencyConstants, bool]:
        """(constants, inject) for the configured latency model."""
        if self.latency_model == "off":
            return BF3, False
        if self.latency_model == "bf3":
            return BF3, True
        path = self.latency_model.split(":", 1)[1]
        try:
            return LatencyConstants.from_file(path), True
        except (OSError, TypeError, ValueError) as exc:
            raise ConfigError("latency_model", f"cannot read {path}: {exc}") from None

    def store_config(self) -> StoreConfig:
        constants, inject = self.latency()
        engine = EngineConfig(
            threads=self.threads,
            buffer_capacity=self.buffer_capacity,
            cache_enabled=self.cache,
            eps=EpsilonConfig(self.eps_inner, self.eps_leaf, self.infinite_mode),
            instrument=self.instrument,
            latency=constants,
            inject_latency=inject,
            seed=self.seed,
        )
        return StoreConfig(
            engine=engine,
            partitions=self.partitions,
            patchers=self.patchers,
            stitch_capacity=self.stitch_capacity,
            command_latency_us=self.command_latency_us,
            retrain_bound_fraction=self.retrain_bound_fraction,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, typ: str, raw: Any) -> Any:
    if typ == "bool":
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ConfigError(name, f"expected a boolean, got {raw!r}")
    conv = {"int": int, "float": float, "str": str}[typ]
    if typ == "int" and isinstance(raw, float) and not raw.is_integer():
        raise ConfigError(name, f"expected an integer, got {raw!r}")
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {typ}, got {raw!r}") from None


def _types() -> dict[str, str]:
    return {f.name: f.type for f in fields(Config)}


def load_config(
    cli: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
    file: str | Path | None = None,
) -> Config:
    """Build a validated :class:`Config`; later sources override earlier ones.

    ``cli`` entries set to None count as "not given".
    """
    types = _types()
    merged: dict[str, Any] = {}
    if file:
        try:
            data = json.loads(Path(file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {file}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", f"{file} must hold a JSON object")
        for k, v in data.items():
            if k not in types:
                raise ConfigError(k, "unknown field in config file")
            merged[k] = _coerce(k, types[k], v)
    env = os.environ if env is None else env
    for k, typ in types.items():
        raw = env.get(ENV_PREFIX + k.upper())
        if raw is not None:
            merged[k] = _coerce(k, typ, raw)
    for k, v in (cli or {}).items():
        if v is None:
            continue
        if k not in types:
            raise ConfigError(k, "unknown field")
        merged[k] = _coerce(k, types[k], v)
    return Config(**merged).validate()
