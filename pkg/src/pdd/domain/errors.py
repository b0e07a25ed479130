from __future__ import annotations

from collections.abc import Sequence
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from pdd.domain.models import ConflictRecord


class PddError(Exception):
    """Base class for every toolchain failure that is not an admission outcome."""


class IntegrityError(PddError):
    """A digest, signature, or hash-link check failed."""


# ── Bundles ──────────────────────────────────────────────────────────


class MissingManifest(PddError):
    def __init__(self, root: str) -> None:
        super().__init__(f"No protocol.yaml found in {root}")
        self.root = root


class DanglingReference(PddError):
    def __init__(self, file: str, reference: str) -> None:
        super().__init__(f"{file}: referenced file '{reference}' does not exist")
        self.file = file
        self.reference = reference


class MissingInvariantFile(DanglingReference):
    def __init__(self, file: str, key: str) -> None:
        PddError.__init__(self, f"{file}: invariants map has no '{key}' entry")
        self.file = file
        self.reference = key


class GrammarError(PddError):
    def __init__(self, file: str, path: str, message: str) -> None:
        super().__init__(f"{file}:{path or '/'}: {message}")
        self.file = file
        self.path = path
        self.message = message


class NonCanonicalizable(PddError):
    pass


class ProtocolMismatch(PddError):
    pass


class UnsupportedPropertyKind(PddError):
    pass


# ── Negotiation ──────────────────────────────────────────────────────


class RegistryUnavailable(PddError):
    pass


class NegotiationFailed(PddError):
    def __init__(self, conflicts: Sequence[ConflictRecord]) -> None:
        summary = ", ".join(f"{c.protocol_id}:{c.kind}" for c in conflicts)
        super().__init__(f"Negotiation failed with {len(conflicts)} conflict(s): {summary}")
        self.conflicts = tuple(conflicts)


# ── Harness ──────────────────────────────────────────────────────────


class LaunchFailure(PddError):
    def __init__(self, message: str, exit_status: int | None = None) -> None:
        super().__init__(message)
        self.exit_status = exit_status


class HandshakeTimeout(PddError):
    pass


class FramingError(PddError):
    def __init__(self, message: str, line: str = "") -> None:
        super().__init__(message)
        self.line = line


class CandidateUnresponsive(PddError):
    pass


# ── Validation and evidence ──────────────────────────────────────────


class UnknownValidator(PddError):
    pass


class SigningFailure(PddError):
    pass


class LedgerCorrupt(IntegrityError):
    def __init__(self, message: str, index: int | None = None) -> None:
        super().__init__(message)
        self.index = index


# ── Remediation ──────────────────────────────────────────────────────


class NotAViolation(PddError):
    pass


class UnresolvedClause(PddError):
    pass


# ── Registry ─────────────────────────────────────────────────────────


class NotFound(PddError):
    pass


class VersionConflict(PddError):
    pass


class DigestMismatch(IntegrityError):
    pass


class WriteFailure(PddError):
    pass
