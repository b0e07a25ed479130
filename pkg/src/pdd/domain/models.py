from __future__ import annotations

import re
from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any

Number = int | float
Document = dict[str, Any]

_SEMVER_RE = re.compile(r"(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)")
_RANGE_RE = re.compile(r">=\s*(\S+)\s+<\s*(\S+)")


# ── Versions ─────────────────────────────────────────────────────────


@dataclass(frozen=True, order=True)
class SemVer:
    major: int
    minor: int
    patch: int

    @classmethod
    def parse(cls, text: str) -> SemVer:
        match = _SEMVER_RE.fullmatch(str(text).strip())
        if not match:
            raise ValueError(f"Invalid semantic version '{text}'. Use MAJOR.MINOR.PATCH")
        return cls(*(int(part) for part in match.groups()))

    def __str__(self) -> str:
        return f"{self.major}.{self.minor}.{self.patch}"


@dataclass(frozen=True)
class VersionRange:
    """Half-open version interval: lower inclusive, upper exclusive."""

    lower: SemVer
    upper: SemVer

    @classmethod
    def parse(cls, text: str) -> VersionRange:
        match = _RANGE_RE.fullmatch(str(text).strip())
        if not match:
            raise ValueError(f"Invalid version range '{text}'. Use '>=X.Y.Z <A.B.C'")
        lower, upper = SemVer.parse(match.group(1)), SemVer.parse(match.group(2))
        if not lower < upper:
            raise ValueError(f"Version range '{text}' is empty: lower must be < upper")
        return cls(lower, upper)

    def contains(self, version: SemVer) -> bool:
        return self.lower <= version < self.upper

    def intersect(self, other: VersionRange) -> VersionRange | None:
        lower = max(self.lower, other.lower)
        upper = min(self.upper, other.upper)
        if lower < upper:
            return VersionRange(lower, upper)
        return None

    def __str__(self) -> str:
        return f">={self.lower} <{self.upper}"


# ── Bundle ───────────────────────────────────────────────────────────

MANIFEST_NAME = "protocol.yaml"

SCHEMA_KINDS = ("object", "string", "integer", "number", "enum")

PROPERTY_KINDS = (
    "determinism",
    "range",
    "monotone",
    "fails_closed",
    "idempotent_output",
    "idempotent_stateful",
)


@dataclass(frozen=True)
class SchemaNode:
    kind: str
    required: tuple[str, ...] = ()
    properties: dict[str, SchemaNode] = field(default_factory=dict)
    minimum: Number | None = None
    maximum: Number | None = None
    enum_values: tuple[Any, ...] = ()
    pattern: str | None = None


@dataclass(frozen=True)
class StructuralSchema:
    request: SchemaNode
    response: SchemaNode
    errors: tuple[str, ...]


@dataclass(frozen=True)
class BehavioralProperty:
    """One protocol-visible semantic property and its generation budget."""

    name: str
    kind: str
    quantifier: tuple[str, ...]
    when_clause: Document
    require_clause: Document
    case_count: int

    @property
    def target_field(self) -> str | None:
        return self.require_clause.get("field")

    @property
    def varied_field(self) -> str | None:
        return self.when_clause.get("same_fields_except")

    @property
    def direction(self) -> str:
        return self.require_clause.get("direction", "non_decreasing")

    @property
    def bounds(self) -> tuple[Number | None, Number | None]:
        return self.require_clause.get("minimum"), self.require_clause.get("maximum")

    @property
    def error_kind(self) -> str | None:
        return self.require_clause.get("error_kind")


@dataclass(frozen=True)
class CapabilityManifest:
    network_allowlist: tuple[str, ...] = ()
    deny_other_outbound: bool = True
    fs_read: tuple[str, ...] = ()
    fs_write: tuple[str, ...] = ()
    dependency_allowlist: tuple[str, ...] = ()
    max_latency_ms_p95: Number | None = None
    max_memory_mb: Number | None = None
    per_request_call_budgets: dict[str, int] = field(default_factory=dict)
    secrets_allowlist: tuple[str, ...] = ()
    background_work_allowed: bool = False


@dataclass(frozen=True)
class DependencyDecl:
    protocol_id: str
    version_range: VersionRange


@dataclass(frozen=True)
class ValidatorRequirement:
    name: str
    constraint: VersionRange


@dataclass(frozen=True)
class BundleDocument:
    """One parsed bundle file; ``path`` is relative to the bundle root."""

    path: str
    content: Document


@dataclass(frozen=True)
class ProtocolBundle:
    protocol_id: str
    version: str
    component: str
    structural: StructuralSchema
    behavioral: tuple[BehavioralProperty, ...]
    operational: CapabilityManifest
    dependencies: tuple[DependencyDecl, ...]
    validator_requirements: tuple[ValidatorRequirement, ...]
    provenance: Document
    documents: tuple[BundleDocument, ...]  # manifest first, then manifest order

    @property
    def semver(self) -> SemVer:
        return SemVer.parse(self.version)


@dataclass(frozen=True)
class SealedBundle:
    bundle: ProtocolBundle
    bundle_digest: str
    sealed_at: datetime

    @property
    def protocol_id(self) -> str:
        return self.bundle.protocol_id

    @property
    def version(self) -> str:
        return self.bundle.version


@dataclass(frozen=True)
class ClauseComparison:
    clause_id: str
    group: str
    status: str  # "preserved"|"strengthened"|"added"|"weakened"|"missing"|"incomparable"
    detail: str = ""

    @property
    def acceptable(self) -> bool:
        return self.status in ("preserved", "strengthened", "added")


@dataclass(frozen=True)
class RefinementReport:
    protocol_id: str
    refined_version: str
    base_version: str
    refines: bool
    comparisons: tuple[ClauseComparison, ...]

    @property
    def weakened(self) -> list[str]:
        return [c.clause_id for c in self.comparisons if not c.acceptable]


# ── Observations ─────────────────────────────────────────────────────

EFFECT_KINDS = (
    "network_call",
    "fs_read",
    "fs_write",
    "dependency_use",
    "secret_access",
    "background_task",
)


@dataclass(frozen=True)
class DeclaredPackage:
    name: str
    version: str = ""
    path: str | None = None


@dataclass(frozen=True)
class CandidateRef:
    artifact_id: str
    artifact_digest: str
    launch_command: tuple[str, ...]
    language: str = ""
    runtime: str = ""
    artifact_path: str | None = None
    files: tuple[str, ...] = ()
    dependencies: tuple[DeclaredPackage, ...] = ()


@dataclass(frozen=True)
class EffectEvent:
    kind: str
    target: str
    post_response: bool = False
    mutating: bool = False


@dataclass(frozen=True)
class ErrorOutcome:
    kind: str
    message: str = ""


@dataclass(frozen=True)
class Outcome:
    """Exactly one of ``response`` or ``error`` is set."""

    response: Document | None = None
    error: ErrorOutcome | None = None

    @property
    def is_error(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class InvocationRecord:
    seq: int
    request: Document
    outcome: Outcome
    effects: tuple[EffectEvent, ...]
    latency_ms: Number
    peak_memory_mb: Number
    at: datetime | None = None
    timed_out: bool = False


@dataclass(frozen=True)
class EffectTrace:
    invocations: tuple[InvocationRecord, ...]
    started_at: datetime
    ended_at: datetime


# ── Validation ───────────────────────────────────────────────────────

STRUCTURAL = "structural"
BEHAVIORAL = "behavioral"
OPERATIONAL = "operational"

STRUCTURAL_DRIFT = "structural_drift"
BEHAVIORAL_DRIFT = "behavioral_drift"
OPERATIONAL_DEGRADATION = "operational_degradation"
AUTHORITY_VIOLATION = "authority_violation"


@dataclass(frozen=True)
class Counterexample:
    inputs: tuple[Document, ...]
    observed: Any
    expected: Any
    shrink_steps: int = 0


@dataclass(frozen=True)
class ClauseOutcome:
    clause_id: str
    passed: bool
    counterexample: Counterexample | None = None
    observed_value: Number | None = None
    allowed_value: Number | None = None
    path: str | None = None
    detail: str = ""
    observation_seq: int | None = None


@dataclass(frozen=True)
class ValidatorResult:
    name: str
    version: str
    result: str  # "pass"|"fail"
    clauses: tuple[ClauseOutcome, ...]
    metrics: dict[str, Number]

    @property
    def passed(self) -> bool:
        return self.result == "pass"

    @property
    def failed_clauses(self) -> list[ClauseOutcome]:
        return [c for c in self.clauses if not c.passed]


@dataclass(frozen=True)
class PropertyRun:
    seed: int
    case_count: int
    shrink_limit: int = 100

    def __post_init__(self) -> None:
        if self.case_count < 1:
            raise ValueError("case_count must be >= 1")


@dataclass(frozen=True)
class ValidationRun:
    """All validator results of one admission attempt plus the merged trace they judged."""

    results: tuple[ValidatorResult, ...]
    trace: EffectTrace

    @property
    def admitted(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)


@dataclass(frozen=True)
class CompiledClause:
    """One executable predicate of a GuaranteeSurface, tagged with its source clause."""

    clause_id: str
    group: str
    category: str
    declaration: Document
    monitorable: bool
    predicate: Callable[[EffectTrace], ClauseOutcome] = field(compare=False, repr=False)

    def evaluate(self, trace: EffectTrace) -> ClauseOutcome:
        return self.predicate(trace)


@dataclass(frozen=True)
class SurfaceVerdict:
    outcomes: tuple[ClauseOutcome, ...]

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    @property
    def failing_clause_ids(self) -> list[str]:
        return [o.clause_id for o in self.outcomes if not o.passed]


@dataclass(frozen=True)
class GuaranteeSurface:
    protocol_id: str
    version: str
    bundle_digest: str
    clauses: tuple[CompiledClause, ...]

    def group(self, name: str) -> tuple[CompiledClause, ...]:
        return tuple(c for c in self.clauses if c.group == name)

    def clause(self, clause_id: str) -> CompiledClause | None:
        return next((c for c in self.clauses if c.clause_id == clause_id), None)

    def evaluate(self, trace: EffectTrace) -> SurfaceVerdict:
        return SurfaceVerdict(tuple(c.evaluate(trace) for c in self.clauses))


@dataclass(frozen=True)
class CandidateVerdict:
    artifact_id: str
    passed: bool
    failing_clauses: tuple[str, ...]


@dataclass(frozen=True)
class SubstitutabilityReport:
    protocol_id: str
    verdicts: tuple[CandidateVerdict, ...]

    @property
    def substitutable(self) -> bool:
        return bool(self.verdicts) and all(v.passed for v in self.verdicts)


# ── Negotiation ──────────────────────────────────────────────────────


@dataclass(frozen=True)
class Pin:
    version: str
    bundle_digest: str


@dataclass(frozen=True)
class ConflictRecord:
    protocol_id: str
    kind: str  # "version_conflict"|"unresolvable"|"capability_conflict"
    ranges: tuple[str, ...] = ()
    available_versions: tuple[str, ...] = ()
    destinations: tuple[str, ...] = ()
    detail: str = ""


@dataclass(frozen=True)
class ResolutionResult:
    pinned: dict[str, Pin]
    conflicts: tuple[ConflictRecord, ...]


# ── Evidence ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ProtocolBinding:
    protocol_id: str
    version: str
    bundle_digest: str


@dataclass(frozen=True)
class ImplementationBinding:
    artifact_id: str
    artifact_digest: str
    language: str
    runtime: str


@dataclass(frozen=True)
class ValidatorSummary:
    name: str
    version: str
    result: str
    metrics: dict[str, Number]


@dataclass(frozen=True)
class PackageDigest:
    name: str
    version: str
    digest: str


@dataclass(frozen=True)
class FileDigest:
    path: str
    digest: str


@dataclass(frozen=True)
class DiscoveryLog:
    """As-built record of what a validated implementation was observed to be."""

    artifact_id: str
    artifact_digest: str
    language: str
    runtime: str
    dependency_graph: tuple[PackageDigest, ...]
    generated_files: tuple[FileDigest, ...]
    validators: tuple[tuple[str, str], ...]
    properties_run: int
    properties_declared: int
    resource_usage: dict[str, Number]
    derived_behaviors: tuple[str, ...]

    @property
    def property_coverage(self) -> str:
        return f"{self.properties_run}/{self.properties_declared}"


@dataclass(frozen=True)
class EvidenceObject:
    evidence_id: str
    protocol: ProtocolBinding
    implementation: ImplementationBinding
    validators: tuple[ValidatorSummary, ...]
    decision: str
    issued_at: datetime
    issuer: str
    signature_scheme: str
    trace_digests: tuple[str, ...]
    discovery_log_digest: str
    signature: str


@dataclass(frozen=True)
class FailedClause:
    validator: str
    clause_id: str
    path: str | None = None
    observed_value: Number | None = None
    allowed_value: Number | None = None
    detail: str = ""


@dataclass(frozen=True)
class RejectionReport:
    report_id: str
    protocol: ProtocolBinding
    implementation: ImplementationBinding
    validators: tuple[ValidatorSummary, ...]
    failed_clauses: tuple[FailedClause, ...]
    issued_at: datetime
    issuer: str
    trace_digests: tuple[str, ...]
    discovery_log_digest: str


@dataclass(frozen=True)
class VerificationCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class VerificationVerdict:
    checks: tuple[VerificationCheck, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


# ── Runtime ledger ───────────────────────────────────────────────────


@dataclass(frozen=True)
class DeployedImplementation:
    artifact_digest: str
    deployed_version: str


@dataclass(frozen=True)
class VerifierIdentity:
    name: str
    version: str


@dataclass(frozen=True)
class Attestation:
    decision: str  # "pass"|"violation"
    trace_digest: str
    raw_trace_location: str
    violated_invariant: str | None = None
    category: str | None = None
    observed_value: Number | None = None
    allowed_value: Number | None = None
    summary: dict[str, Number] | None = None


@dataclass(frozen=True)
class EnforcementAction:
    runtime: str  # "none"|"block"|"quarantine"|"rate_limit"|"rollback"
    remediation_context: str | None = None


@dataclass(frozen=True)
class LedgerBlock:
    ledger_block_id: str
    previous_block_digest: str
    protocol_id: str
    protocol_version: str
    implementation: DeployedImplementation
    runtime_verifier: VerifierIdentity
    interval_start: datetime
    interval_end: datetime
    attestation: Attestation
    action: EnforcementAction
    issuer: str
    signature_scheme: str
    signature: str


@dataclass(frozen=True)
class GenesisRecord:
    """L_0: the build-time admission evidence that roots a runtime ledger."""

    ledger_block_id: str
    evidence: EvidenceObject
    issuer: str
    signature_scheme: str
    signature: str


@dataclass(frozen=True)
class Ledger:
    path: str
    genesis: GenesisRecord
    blocks: tuple[LedgerBlock, ...]

    @property
    def length(self) -> int:
        return 1 + len(self.blocks)


@dataclass(frozen=True)
class RuntimeProjection:
    clauses: tuple[CompiledClause, ...]
    excluded: tuple[str, ...]


@dataclass(frozen=True)
class AttestationInterval:
    observations: EffectTrace
    start: datetime
    end: datetime

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError("interval start must not be after end")


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    length: int
    failed_index: int | None = None
    reason: str = ""


# ── Remediation ──────────────────────────────────────────────────────


@dataclass(frozen=True)
class EvidencePointer:
    ledger_block_id: str
    trace_digest: str
    raw_trace_location: str


@dataclass(frozen=True)
class RepairContext:
    context_id: str
    violated_clause: str
    clause_declaration: str
    category: str | None
    observed_value: Number | None
    allowed_value: Number | None
    protocol: ProtocolBinding
    implementation: DeployedImplementation
    evidence: EvidencePointer
    environment: dict[str, str]
    ledger_head_digest: str
    created_at: datetime


# ── Registry ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PublicationRecord:
    protocol_id: str
    version: str
    bundle_digest: str
    path: str
    publisher: str
    published_at: datetime
    created: bool


@dataclass(frozen=True)
class RegistryEntry:
    protocol_id: str
    version: str
    bundle_digest: str


@dataclass(frozen=True)
class StorageReceipt:
    digest: str
    path: str
