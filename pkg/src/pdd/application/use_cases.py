import json
import logging
import random
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

from pdd.config import EnforcementPolicy, HarnessPolicy
from pdd.domain.errors import LedgerCorrupt, NegotiationFailed, NotFound, ProtocolMismatch
from pdd.domain.models import (
    CandidateRef,
    CandidateVerdict,
    DiscoveryLog,
    Document,
    EffectTrace,
    EvidenceObject,
    LedgerBlock,
    PropertyRun,
    ProtocolBundle,
    RejectionReport,
    RepairContext,
    SealedBundle,
    SubstitutabilityReport,
    ValidationRun,
)
from pdd.domain.ports import BundleRegistry, Clock, EvidenceStore, SessionFactory, Signer
from pdd.infrastructure.bundle_reader import parse_bundle, update_provenance
from pdd.infrastructure.canonical import digest_hex, document_digest
from pdd.infrastructure.documents import (
    discovery_log_to_document,
    evidence_from_document,
    to_document,
    trace_from_document,
    trace_to_document,
)
from pdd.infrastructure.evidence_engine import (
    build_discovery_log,
    build_evidence,
    next_sequence,
)
from pdd.infrastructure.guarantee_compiler import compile_guarantees
from pdd.infrastructure.harness import session_factory
from pdd.infrastructure.ledger_engine import (
    attest_interval,
    head_digest,
    project_monitorable,
    read_ledger,
    split_intervals,
    verify_chain,
)
from pdd.infrastructure.property_engine import case_seed, generate_value
from pdd.infrastructure.remediation_engine import build_repair_context, resubmit
from pdd.infrastructure.resolution_engine import reconcile_capabilities, resolve_dependencies
from pdd.infrastructure.seal_engine import seal_bundle
from pdd.infrastructure.storage import exclusive_lock, write_canonical
from pdd.infrastructure.validation_engine import validate

logger = logging.getLogger(__name__)

TRACES_DIR = "traces"
DISCOVERY_DIR = "discovery"
EVIDENCE_LOCK = ".evidence.lock"


@dataclass(frozen=True)
class AdmissionOutcome:
    """One admission attempt: the run, its discovery log, and the evidence or rejection."""

    run: ValidationRun
    discovery_log: DiscoveryLog
    result: EvidenceObject | RejectionReport
    path: Path

    @property
    def admitted(self) -> bool:
        return isinstance(self.result, EvidenceObject)

    @property
    def result_id(self) -> str:
        return self.result.evidence_id if self.admitted else self.result.report_id


# ── Bundles ──────────────────────────────────────────────────────────


def seal(bundle_dir: str | Path, clock: Clock) -> SealedBundle:
    return seal_bundle(parse_bundle(bundle_dir), clock)


def negotiate(root: ProtocolBundle, registry: BundleRegistry, clock: Clock) -> SealedBundle:
    """Pin every transitive dependency, reconcile capabilities, then seal.

    Pinned digests are recorded in the sealed bundle's provenance, so two
    negotiations against different registry states seal to different digests.
    """
    resolution = resolve_dependencies(root, registry)
    conflicts = list(resolution.conflicts)
    if not conflicts:
        pinned = {pid: registry.get(pid, pin.version) for pid, pin in resolution.pinned.items()}
        conflicts.extend(reconcile_capabilities(root, pinned))
    if conflicts:
        raise NegotiationFailed(conflicts)
    if resolution.pinned:
        root = update_provenance(
            root,
            {
                "pinned_dependencies": {
                    pid: {"version": pin.version, "bundle_digest": pin.bundle_digest}
                    for pid, pin in sorted(resolution.pinned.items())
                }
            },
        )
    return seal_bundle(root, clock)


# ── Admission ────────────────────────────────────────────────────────


def _store_run_artifacts(evidence_dir: Path, trace: EffectTrace, log: DiscoveryLog) -> None:
    trace_doc = trace_to_document(trace)
    write_canonical(evidence_dir / TRACES_DIR / f"{digest_hex(document_digest(trace_doc))}.json", trace_doc)
    log_doc = discovery_log_to_document(log)
    write_canonical(evidence_dir / DISCOVERY_DIR / f"{digest_hex(document_digest(log_doc))}.json", log_doc)


def record_admission(
    sealed: SealedBundle,
    candidate: CandidateRef,
    run: ValidationRun,
    clock: Clock,
    signer: Signer,
    evidence_dir: str | Path,
    registry: EvidenceStore | None = None,
) -> AdmissionOutcome:
    """Build the discovery log and evidence (or rejection) and write them out.

    The raw trace and discovery log are stored by digest beside the evidence
    so the result can be re-checked later without re-running the candidate.
    """
    directory = Path(evidence_dir)
    log = build_discovery_log(candidate, run.results, (run.trace,), sealed)
    issued_at = clock.now()
    _store_run_artifacts(directory, run.trace, log)
    # The id is chosen and its file written under one lock so no two admissions share it.
    with exclusive_lock(directory / EVIDENCE_LOCK):
        sequence = next_sequence(directory, "evd" if run.admitted else "rej", issued_at)
        result = build_evidence(sealed, candidate, run, clock, signer, log, sequence)
        result_id = result.evidence_id if isinstance(result, EvidenceObject) else result.report_id
        path = write_canonical(directory / f"{result_id}.json", to_document(result))
    if registry is not None:
        registry.store_evidence(result)
    return AdmissionOutcome(run=run, discovery_log=log, result=result, path=path)


def admit(
    sealed: SealedBundle,
    candidate: CandidateRef,
    policy: HarnessPolicy,
    run: PropertyRun,
    clock: Clock,
    signer: Signer,
    evidence_dir: str | Path,
    registry: EvidenceStore | None = None,
    factory: SessionFactory | None = None,
) -> AdmissionOutcome:
    outcome = validate(sealed, factory or session_factory(candidate, policy), run)
    return record_admission(sealed, candidate, outcome, clock, signer, evidence_dir, registry)


def load_evidence_file(path: str | Path) -> EvidenceObject:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "signature" not in doc:
        raise ValueError(f"{path} is not an evidence object (rejection reports are unsigned)")
    return evidence_from_document(doc)


def read_trace(path: str | Path) -> EffectTrace:
    return trace_from_document(json.loads(Path(path).read_text(encoding="utf-8")))


# ── Substitutability ─────────────────────────────────────────────────


def generate_workload(sealed: SealedBundle, seed: int, count: int) -> list[Document]:
    """Schema-valid requests a protocol-respecting client might send."""
    request = sealed.bundle.structural.request
    return [generate_value(request, random.Random(case_seed(seed, "workload", i))) for i in range(count)]


def check_substitutability(
    sealed: SealedBundle,
    candidates: Sequence[CandidateRef],
    workload: Sequence[Document],
    policy: HarnessPolicy,
    client: Callable[[EffectTrace], list[str]] | None = None,
    factory_for: Callable[[CandidateRef], SessionFactory] | None = None,
) -> SubstitutabilityReport:
    """Drive one client workload through every candidate and judge each trace.

    Without *client* only the compiled guarantee surface is asserted. A
    client that assumes more than the surface reports its own failing
    assertion names, which are listed next to clause ids.
    """
    surface = compile_guarantees(sealed)
    verdicts = []
    for candidate in candidates:
        factory = factory_for(candidate) if factory_for else session_factory(candidate, policy)
        session = factory()
        try:
            for request in workload:
                session.invoke(request)
            trace = session.collect_trace()
        finally:
            session.close()
        failing = surface.evaluate(trace).failing_clause_ids
        if client is not None:
            failing += client(trace)
        verdicts.append(CandidateVerdict(candidate.artifact_id, not failing, tuple(failing)))
        logger.info("%s under the client workload: %s", candidate.artifact_id, failing or "pass")
    return SubstitutabilityReport(sealed.protocol_id, tuple(verdicts))


# ── Runtime ──────────────────────────────────────────────────────────


def attest(
    ledger_dir: str | Path,
    sealed: SealedBundle,
    trace: EffectTrace,
    policy: EnforcementPolicy,
    clock: Clock,
    signer: Signer,
    trust: Mapping[str, str],
    interval_size: int | None = None,
    interval_seconds: float | None = None,
    deployed_version: str | None = None,
) -> list[LedgerBlock]:
    """Append one block per interval of *trace* to the ledger in *ledger_dir*."""
    ledger = read_ledger(ledger_dir)
    admitted = ledger.genesis.evidence.protocol
    if sealed.bundle_digest != admitted.bundle_digest:
        raise ProtocolMismatch(
            f"Ledger was admitted against {admitted.bundle_digest}, not {sealed.bundle_digest}"
        )
    projection = project_monitorable(compile_guarantees(sealed))
    blocks = []
    for interval in split_intervals(trace, interval_size, interval_seconds):
        blocks.append(
            attest_interval(
                read_ledger(ledger_dir), projection, interval, policy, clock, signer, trust, deployed_version
            )
        )
    return blocks


def remediate(
    ledger_dir: str | Path,
    block_id: str,
    registry: BundleRegistry,
    clock: Clock,
    trust: Mapping[str, str],
    environment: Mapping[str, str] | None = None,
) -> RepairContext:
    """Build the repair context for violation block *block_id*."""
    ledger = read_ledger(ledger_dir)
    verdict = verify_chain(ledger, trust)
    if not verdict.ok:
        raise LedgerCorrupt(verdict.reason, verdict.failed_index)
    block = next((b for b in ledger.blocks if b.ledger_block_id == block_id), None)
    if block is None:
        raise NotFound(f"No block '{block_id}' in {ledger.path}")
    sealed = registry.get_by_digest(ledger.genesis.evidence.protocol.bundle_digest)
    return build_repair_context(block, sealed, Path(ledger.path).parent, clock, head_digest(ledger), environment)


def resubmit_repair(
    context: RepairContext,
    candidate: CandidateRef,
    policy: HarnessPolicy,
    registry: BundleRegistry,
    run: PropertyRun,
    clock: Clock,
    signer: Signer,
    evidence_dir: str | Path,
    factory: SessionFactory | None = None,
) -> AdmissionOutcome:
    """Send a repaired candidate through ordinary admission against the context's bundle."""
    sealed = registry.get_by_digest(context.protocol.bundle_digest)
    outcome = resubmit(context, factory or session_factory(candidate, policy), registry, run)
    return record_admission(sealed, candidate, outcome, clock, signer, evidence_dir, registry)
