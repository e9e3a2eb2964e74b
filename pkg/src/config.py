"""Runtime engine configuration, environment overrides and logging setup."""

from __future__ import annotations

import json
import logging
import os
import socket
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, cast

from .distribution import StrategySpec
from .errors import ConfigError

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .types import EngineKind, QueuePolicy

CONFIG_ENV = "CHUNKSTREAM_CONFIG"
HOSTNAME_ENV = "CHUNKSTREAM_HOSTNAME"
LOG_LEVEL_ENV = "CHUNKSTREAM_LOG_LEVEL"

_ENGINES = ("stream", "file")
_POLICIES = ("discard", "block")


def default_hostname() -> str:
    """Virtual hostname from ``CHUNKSTREAM_HOSTNAME``, else the real one."""
    return os.environ.get(HOSTNAME_ENV) or socket.gethostname()


def setup_logging(level: str | None = None) -> None:
    """Configure root logging for a command-line entry point."""
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _default_strategy() -> StrategySpec:
    return StrategySpec("binpacking")


@dataclass(frozen=True)
class EngineConfig:
    """Engine selection and tuning, loadable from a JSON document.

    Fields one engine has no use for are ignored by it. Both engines use the
    bind address, port range and timeouts once a writer group spans processes.
    """

    engine: EngineKind = "stream"
    queue_policy: QueuePolicy = "discard"
    queue_depth: int = 2
    strategy: StrategySpec = field(default_factory=_default_strategy)
    contact_path: Path | None = None
    aggregation_group: int = 1
    bind_address: str = "127.0.0.1"
    port_range: tuple[int, int] = (0, 0)
    rendezvous_timeout_s: float = 30.0
    close_timeout_s: float = 60.0
    max_connections: int = 64
    write_delay_ms: int = 0

    def __post_init__(self) -> None:
        if self.engine not in _ENGINES:
            msg = f"engine must be one of {_ENGINES}, got {self.engine!r}"
            raise ConfigError(msg)
        if self.queue_policy not in _POLICIES:
            msg = f"queue_policy must be one of {_POLICIES}, got {self.queue_policy!r}"
            raise ConfigError(msg)
        if self.queue_depth < 1:
            msg = f"queue_depth must be >= 1, got {self.queue_depth}"
            raise ConfigError(msg)
        if self.aggregation_group < 1:
            msg = f"aggregation_group must be >= 1, got {self.aggregation_group}"
            raise ConfigError(msg)
        lo, hi = self.port_range
        if not (0 <= lo <= hi <= 65535):
            msg = f"invalid port range {self.port_range}"
            raise ConfigError(msg)
        if self.rendezvous_timeout_s <= 0 or self.close_timeout_s <= 0:
            msg = "timeouts must be positive"
            raise ConfigError(msg)
        if self.max_connections < 1:
            msg = f"max_connections must be >= 1, got {self.max_connections}"
            raise ConfigError(msg)
        if self.write_delay_ms < 0:
            msg = f"write_delay_ms must be >= 0, got {self.write_delay_ms}"
            raise ConfigError(msg)

    def contact_file(self, series_name: str) -> Path:
        """Where a stream writer for ``series_name`` publishes its contact document."""
        return self.contact_path or Path(f"{series_name}.contact.json")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> EngineConfig:
        """Build a config from a parsed JSON document; unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            msg = f"unknown engine config keys: {sorted(unknown)}"
            raise ConfigError(msg)
        kwargs: dict[str, Any] = dict(doc)
        if "strategy" in kwargs:
            strategy = kwargs["strategy"]
            if not isinstance(strategy, dict):
                msg = "'strategy' must be an object"
                raise ConfigError(msg)
            kwargs["strategy"] = StrategySpec.from_dict(strategy)
        if kwargs.get("contact_path") is not None:
            kwargs["contact_path"] = Path(kwargs["contact_path"])
        if "port_range" in kwargs:
            try:
                lo, hi = kwargs["port_range"]
            except (TypeError, ValueError) as exc:
                msg = f"port_range must be [lo, hi], got {kwargs['port_range']!r}"
                raise ConfigError(msg) from exc
            kwargs["port_range"] = (int(lo), int(hi))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            msg = f"invalid engine config: {exc}"
            raise ConfigError(msg) from exc

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, StrategySpec):
                value = value.to_dict()
            elif isinstance(value, Path):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            doc[f.name] = value
        return doc

    def replace(self, **changes: Any) -> EngineConfig:
        """Copy with some fields changed."""
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc.update(changes)
        return EngineConfig(**doc)

    @classmethod
    def load(cls, path: Path) -> EngineConfig:
        """Read a config document from ``path``."""
        try:
            with path.open() as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            msg = f"{path}: not valid JSON ({exc})"
            raise ConfigError(msg) from exc
        if not isinstance(doc, dict):
            msg = f"{path}: config must be a JSON object"
            raise ConfigError(msg)
        return cls.from_dict(cast("dict[str, Any]", doc))

    @classmethod
    def resolve(cls, path: Path | str | None = None) -> EngineConfig:
        """Explicit ``path``, else ``$CHUNKSTREAM_CONFIG``, else defaults."""
        chosen = path or os.environ.get(CONFIG_ENV)
        if chosen:
            return cls.load(Path(chosen))
        return cls()
