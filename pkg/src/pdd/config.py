"""Runtime configuration resolved from ``PDD_*`` environment variables."""
from __future__ import annotations

import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from pdd.domain.models import (
    AUTHORITY_VIOLATION,
    BEHAVIORAL_DRIFT,
    OPERATIONAL_DEGRADATION,
    STRUCTURAL_DRIFT,
)

SCHEMA_VALIDATOR = ("schema-conformance", "0.4.2")
PROPERTY_VALIDATOR = ("property-check", "0.9.1")
CAPABILITY_VALIDATOR = ("capability-monitor", "0.3.0")
RUNTIME_VERIFIER = ("capability-monitor", "0.3.0")

SIGNATURE_SCHEME = "ed25519"
DEFAULT_ISSUER = "validation-engine.local"

# Virtual start time for sessions running under the synthetic clock.
SYNTHETIC_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)

WALL = "wall"
SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class HarnessPolicy:
    handshake_timeout_s: float = 5.0
    deadline_ms: int = 2000
    grace_ms: int = 200
    clock: str = WALL

    def __post_init__(self) -> None:
        if self.clock not in (WALL, SYNTHETIC):
            raise ValueError(f"clock must be '{WALL}' or '{SYNTHETIC}', got '{self.clock}'")
        if self.deadline_ms <= 0 or self.grace_ms < 0 or self.handshake_timeout_s <= 0:
            raise ValueError("harness timeouts must be positive")

    @property
    def synthetic(self) -> bool:
        return self.clock == SYNTHETIC


_DEFAULT_ACTIONS = {
    STRUCTURAL_DRIFT: "block",
    OPERATIONAL_DEGRADATION: "quarantine",
    BEHAVIORAL_DRIFT: "rate_limit",
    AUTHORITY_VIOLATION: "rate_limit",
}

RUNTIME_ACTIONS = ("none", "block", "quarantine", "rate_limit", "rollback")


@dataclass(frozen=True)
class EnforcementPolicy:
    """Maps a violation's anomaly category to the recorded runtime action."""

    actions: Mapping[str, str] = field(default_factory=lambda: dict(_DEFAULT_ACTIONS))
    fallback: str = "rate_limit"

    def __post_init__(self) -> None:
        for category, action in self.actions.items():
            if action not in RUNTIME_ACTIONS or action == "none":
                raise ValueError(f"invalid enforcement action '{action}' for {category}")

    def action_for(self, category: str | None) -> str:
        return self.actions.get(category or "", self.fallback)


@dataclass(frozen=True)
class Settings:
    registry: Path = Path("registry")
    signing_key: Path | None = None
    issuer: str = DEFAULT_ISSUER
    trust_map: Path | None = None
    log_level: str = "WARNING"
    runs_db: Path = Path.home() / ".pdd" / "runs.db"

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> Settings:
        env = os.environ if env is None else env

        def optional_path(name: str) -> Path | None:
            value = env.get(name)
            return Path(value).expanduser() if value else None

        return cls(
            registry=Path(env.get("PDD_REGISTRY", "registry")).expanduser(),
            signing_key=optional_path("PDD_SIGNING_KEY"),
            issuer=env.get("PDD_ISSUER", DEFAULT_ISSUER),
            trust_map=optional_path("PDD_TRUST_MAP"),
            log_level=env.get("PDD_LOG_LEVEL", "WARNING").upper(),
            runs_db=optional_path("PDD_RUNS_DB") or Path.home() / ".pdd" / "runs.db",
        )
