from collections.abc import Callable
from datetime import datetime
from typing import Any, Protocol

from pdd.domain.models import (
    Document,
    EffectTrace,
    InvocationRecord,
    RegistryEntry,
    SealedBundle,
    StorageReceipt,
)


class Clock(Protocol):
    def now(self) -> datetime: ...


class CandidateSession(Protocol):
    def invoke(self, request: Document, deadline_ms: int | None = None) -> InvocationRecord: ...
    def collect_trace(self) -> EffectTrace: ...
    def close(self) -> None: ...


SessionFactory = Callable[[], CandidateSession]


class BundleRegistry(Protocol):
    def versions(self, protocol_id: str) -> list[str]: ...
    def get(self, protocol_id: str, version: str) -> SealedBundle: ...
    def get_by_digest(self, bundle_digest: str) -> SealedBundle: ...
    def list(self) -> list[RegistryEntry]: ...


class Signer(Protocol):
    issuer: str
    scheme: str

    def sign(self, payload: bytes) -> str: ...


class EvidenceStore(Protocol):
    def store_evidence(self, item: Any) -> StorageReceipt: ...
