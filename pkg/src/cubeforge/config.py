"""Application configuration: one key=value file plus overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .engine.job import DEFAULT_MEM_BUDGET
from .errors import ConfigError

_SIZE_SUFFIX = {"k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20, "g": 1 << 30, "gib": 1 << 30}


def parse_size(text) -> int:
    if isinstance(text, int):
        return text
    t = str(text).strip().lower()
    for suf, mult in sorted(_SIZE_SUFFIX.items(), key=lambda kv: -len(kv[0])):
        if t.endswith(suf):
            return int(float(t[: -len(suf)]) * mult)
    return int(t)


def parse_interval(text) -> Optional[int]:
    """Checkpoint interval; ``inf``/``none``/``0`` disable checkpointing."""
    if text is None:
        return None
    t = str(text).strip().lower()
    if t in ("", "inf", "none", "off", "0", "never"):
        return None
    v = int(t)
    if v < 0:
        raise ConfigError("checkpoint interval must be >= 1 or disabled")
    return v


@dataclass
class AppConfig:
    app_id: str = "cube"
    schema: Optional[str] = None
    functions: list = field(default_factory=lambda: ["SUM"])
    reducers: int = 8
    sample_rate: int = 100
    checkpoint_interval: Optional[int] = None
    workers: int = 1
    mappers: int = 4
    nodes: int = 4
    mem_budget: int = DEFAULT_MEM_BUDGET
    root: str = "cubeforge-root"
    seed: int = 0
    combine: bool = True
    profile: Optional[str] = None
    cuboids: Optional[list] = None     # partial cube, as labels; None = full cube
    ccc_repeats: int = 1

    def validate(self) -> "AppConfig":
        if not self.app_id or any(c in self.app_id for c in "/\\ \t"):
            raise ConfigError(f"bad application id {self.app_id!r}")
        for name in ("reducers", "sample_rate", "workers", "mappers", "nodes", "ccc_repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mem_budget <= 0:
            raise ConfigError("memory budget must be positive")
        if not self.functions:
            raise ConfigError("at least one aggregate function is required")
        return self

    def with_overrides(self, **kw) -> "AppConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AppConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


_INT_KEYS = ("reducers", "sample_rate", "workers", "mappers", "nodes", "seed", "ccc_repeats")
_KEY_ALIASES = {"app": "app_id", "r": "reducers", "s": "sample_rate", "interval": "checkpoint_interval",
                "memory_budget": "mem_budget"}


def coerce(key: str, value: str):
    key = _KEY_ALIASES.get(key, key)
    if key in _INT_KEYS:
        return key, int(value)
    if key == "mem_budget":
        return key, parse_size(value)
    if key == "checkpoint_interval":
        return key, parse_interval(value)
    if key == "combine":
        if value.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"combine must be a boolean, got {value!r}")
        return key, value.lower() in ("1", "true", "yes", "on")
    if key == "functions":
        from .aggregates import split_spec_list
        return key, split_spec_list(value)
    if key == "cuboids":
        return key, [c.strip() for c in value.split(",") if c.strip()]
    return key, value


def load_config(path) -> AppConfig:
    """``key = value`` lines; ``#`` starts a comment.  Relative paths resolve
    against the config file's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        k, v = (x.strip() for x in line.split("=", 1))
        try:
            k, v = coerce(k, v)
        except ValueError as exc:
            raise ConfigError(f"{path}:{no}: {exc}") from exc
        values[k] = v
    for k in ("schema", "root", "profile"):
        if values.get(k) and not Path(values[k]).is_absolute():
            values[k] = str((path.parent / values[k]).resolve())
    return AppConfig.from_dict(values)
