import time
from collections.abc import Callable
from datetime import datetime, timedelta, timezone

from pdd.domain.errors import NotFound
from pdd.domain.models import (
    Document,
    EffectEvent,
    EffectTrace,
    ErrorOutcome,
    InvocationRecord,
    Outcome,
    RegistryEntry,
    SealedBundle,
    SemVer,
)

_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)

Handler = Callable[[Document], tuple[Document, list[EffectEvent], float]]


class FakeSession:
    """In-process stand-in for a candidate session.

    *handler* maps a request to ``(outcome document, effects, latency_ms)``,
    where the outcome document is ``{"response": ...}`` or ``{"error": {"kind": ...}}``.
    """

    def __init__(self, handler: Handler, memory_mb: float = 32.0) -> None:
        self._handler = handler
        self._memory = memory_mb
        self._records: list[InvocationRecord] = []
        self._now = _EPOCH
        self.closed = False

    def invoke(self, request: Document, deadline_ms: int | None = None) -> InvocationRecord:
        outcome_doc, effects, latency = self._handler(request)
        if "error" in outcome_doc:
            outcome = Outcome(error=ErrorOutcome(outcome_doc["error"]["kind"], outcome_doc["error"].get("message", "")))
        else:
            outcome = Outcome(response=outcome_doc["response"])
        record = InvocationRecord(
            seq=len(self._records) + 1,
            request=request,
            outcome=outcome,
            effects=tuple(effects),
            latency_ms=latency,
            peak_memory_mb=self._memory,
            at=self._now,
        )
        self._records.append(record)
        self._now += timedelta(milliseconds=latency)
        return record

    def collect_trace(self) -> EffectTrace:
        return EffectTrace(invocations=tuple(self._records), started_at=_EPOCH, ended_at=self._now)

    def close(self) -> None:
        self.closed = True


def fake_factory(handler: Handler) -> Callable[[], FakeSession]:
    return lambda: FakeSession(handler)


class SlowSigner:
    """Signs through a real *signer* after a pause, so concurrent writers overlap."""

    def __init__(self, signer, pause_s: float = 0.3) -> None:
        self._signer = signer
        self._pause_s = pause_s
        self.issuer = signer.issuer
        self.scheme = signer.scheme

    def sign(self, payload: bytes) -> str:
        time.sleep(self._pause_s)
        return self._signer.sign(payload)


class FakeRegistry:
    """Plain stub implementing the BundleRegistry protocol."""

    def __init__(self, bundles: list[SealedBundle] | None = None) -> None:
        self._bundles = {(b.protocol_id, b.version): b for b in bundles or []}
        self.stored: list = []

    def add(self, sealed: SealedBundle) -> None:
        self._bundles[(sealed.protocol_id, sealed.version)] = sealed

    def versions(self, protocol_id: str) -> list[str]:
        found = [v for p, v in self._bundles if p == protocol_id]
        return sorted(found, key=SemVer.parse)

    def get(self, protocol_id: str, version: str) -> SealedBundle:
        try:
            return self._bundles[(protocol_id, version)]
        except KeyError:
            raise NotFound(f"{protocol_id}@{version}") from None

    def get_by_digest(self, bundle_digest: str) -> SealedBundle:
        for sealed in self._bundles.values():
            if sealed.bundle_digest == bundle_digest:
                return sealed
        raise NotFound(bundle_digest)

    def list(self) -> list[RegistryEntry]:
        return [RegistryEntry(p, v, b.bundle_digest) for (p, v), b in sorted(self._bundles.items())]

    def store_evidence(self, item):
        self.stored.append(item)
