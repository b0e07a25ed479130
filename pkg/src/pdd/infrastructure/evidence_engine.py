"""Discovery logs, signed admission evidence, rejection reports and their verification."""
from __future__ import annotations

import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import replace
from datetime import datetime
from pathlib import Path

from pdd.config import SIGNATURE_SCHEME
from pdd.domain.errors import DigestMismatch, NotFound
from pdd.domain.models import (
    CandidateRef,
    DiscoveryLog,
    EffectTrace,
    EvidenceObject,
    FailedClause,
    FileDigest,
    ImplementationBinding,
    PackageDigest,
    ProtocolBinding,
    RejectionReport,
    SealedBundle,
    ValidationRun,
    ValidatorResult,
    ValidatorSummary,
    VerificationCheck,
    VerificationVerdict,
)
from pdd.domain.ports import BundleRegistry, Clock, Signer
from pdd.infrastructure.artifacts import path_digest
from pdd.infrastructure.canonical import canonical_bytes, document_digest
from pdd.infrastructure.documents import (
    discovery_log_to_document,
    evidence_payload,
    trace_to_document,
)
from pdd.infrastructure.guarantee_compiler import p95
from pdd.infrastructure.signing import verify_signature

logger = logging.getLogger(__name__)

ADMIT = "admit"


def dated_id(prefix: str, moment: datetime, sequence: int, width: int) -> str:
    return f"{prefix}_{moment.strftime('%Y_%m_%d')}_{sequence:0{width}d}"


def next_sequence(directory: str | Path, prefix: str, moment: datetime) -> int:
    """One past the highest ``<prefix>_<date>_<n>.json`` already in *directory*."""
    stem = f"{prefix}_{moment.strftime('%Y_%m_%d')}_"
    pattern = re.compile(re.escape(stem) + r"(\d+)\.json")
    highest = 0
    root = Path(directory)
    if root.is_dir():
        for entry in root.iterdir():
            match = pattern.fullmatch(entry.name)
            if match:
                highest = max(highest, int(match.group(1)))
    return highest + 1


def trace_digest(trace: EffectTrace) -> str:
    return document_digest(trace_to_document(trace))


def _package_digest(name: str, version: str, path: str | None) -> str:
    if path is not None and Path(path).exists():
        return path_digest(path)
    return document_digest({"name": name, "version": version})


def build_discovery_log(
    candidate: CandidateRef,
    results: Sequence[ValidatorResult],
    traces: Sequence[EffectTrace],
    sealed: SealedBundle | None = None,
) -> DiscoveryLog:
    """As-built record of the candidate; every digest is recomputed from disk."""
    invocations = [r for trace in traces for r in trace.invocations]
    property_result = next((r for r in results if r.name == "property-check"), None)
    declared = len(sealed.bundle.behavioral) if sealed is not None else (
        len(property_result.clauses) if property_result else 0
    )
    observed = sorted({f"{e.kind} {e.target}" for r in invocations for e in r.effects})
    return DiscoveryLog(
        artifact_id=candidate.artifact_id,
        artifact_digest=path_digest(candidate.artifact_path) if candidate.artifact_path else candidate.artifact_digest,
        language=candidate.language,
        runtime=candidate.runtime,
        dependency_graph=tuple(
            PackageDigest(p.name, p.version, _package_digest(p.name, p.version, p.path))
            for p in sorted(candidate.dependencies, key=lambda p: p.name)
        ),
        generated_files=tuple(FileDigest(f, path_digest(f)) for f in sorted(candidate.files) if Path(f).is_file()),
        validators=tuple((r.name, r.version) for r in results),
        properties_run=len(property_result.clauses) if property_result else 0,
        properties_declared=declared,
        resource_usage={
            "invocations": len(invocations),
            "p95_latency_ms": p95([r.latency_ms for r in invocations]),
            "peak_memory_mb": max((r.peak_memory_mb for r in invocations), default=0),
        },
        derived_behaviors=tuple(f"observed {o}" for o in observed),
    )


def _bindings(sealed: SealedBundle, candidate: CandidateRef) -> tuple[ProtocolBinding, ImplementationBinding]:
    return (
        ProtocolBinding(sealed.protocol_id, sealed.version, sealed.bundle_digest),
        ImplementationBinding(candidate.artifact_id, candidate.artifact_digest, candidate.language, candidate.runtime),
    )


def _summaries(results: Sequence[ValidatorResult]) -> tuple[ValidatorSummary, ...]:
    return tuple(ValidatorSummary(r.name, r.version, r.result, dict(r.metrics)) for r in results)


def build_evidence(
    sealed: SealedBundle,
    candidate: CandidateRef,
    run: ValidationRun,
    clock: Clock,
    signer: Signer,
    discovery_log: DiscoveryLog,
    sequence: int = 1,
) -> EvidenceObject | RejectionReport:
    """Signed evidence when every validator passed, otherwise an unsigned rejection."""
    issued_at = clock.now()
    protocol, implementation = _bindings(sealed, candidate)
    traces = (trace_digest(run.trace),)
    log_digest = document_digest(discovery_log_to_document(discovery_log))

    if not run.admitted:
        failed = tuple(
            FailedClause(
                validator=r.name,
                clause_id=c.clause_id,
                path=c.path,
                observed_value=c.observed_value,
                allowed_value=c.allowed_value,
                detail=c.detail,
            )
            for r in run.results
            for c in r.failed_clauses
        )
        report = RejectionReport(
            report_id=dated_id("rej", issued_at, sequence, 3),
            protocol=protocol,
            implementation=implementation,
            validators=_summaries(run.results),
            failed_clauses=failed,
            issued_at=issued_at,
            issuer=signer.issuer,
            trace_digests=traces,
            discovery_log_digest=log_digest,
        )
        logger.info(
            "Rejected %s against %s: %s",
            candidate.artifact_id,
            sealed.bundle_digest,
            ", ".join(f.clause_id for f in failed),
        )
        return report

    unsigned = EvidenceObject(
        evidence_id=dated_id("evd", issued_at, sequence, 3),
        protocol=protocol,
        implementation=implementation,
        validators=_summaries(run.results),
        decision=ADMIT,
        issued_at=issued_at,
        issuer=signer.issuer,
        signature_scheme=signer.scheme,
        trace_digests=traces,
        discovery_log_digest=log_digest,
        signature="",
    )
    signature = signer.sign(canonical_bytes(evidence_payload(unsigned)))
    evidence = replace(unsigned, signature=signature)
    logger.info("Admitted %s as %s", candidate.artifact_digest, evidence.evidence_id)
    return evidence


def verify_evidence(
    obj: EvidenceObject,
    trust: Mapping[str, str],
    registry: BundleRegistry | None,
    expected_artifact_digest: str | None = None,
    expected_bundle_digest: str | None = None,
) -> VerificationVerdict:
    """Check scheme, issuer trust, signature and bindings; failures become verdict entries."""
    checks = [
        VerificationCheck("decision", obj.decision == ADMIT, f"decision is '{obj.decision}'"),
        VerificationCheck(
            "signature_scheme", obj.signature_scheme == SIGNATURE_SCHEME, f"scheme '{obj.signature_scheme}'"
        ),
    ]
    key = trust.get(obj.issuer)
    checks.append(VerificationCheck("issuer_trusted", key is not None, f"issuer '{obj.issuer}'"))
    signed = key is not None and verify_signature(key, canonical_bytes(evidence_payload(obj)), obj.signature)
    checks.append(VerificationCheck("signature", signed, "" if signed else "signature does not verify"))

    if registry is not None:
        try:
            stored = registry.get(obj.protocol.protocol_id, obj.protocol.version)
            bound = stored.bundle_digest == obj.protocol.bundle_digest
            detail = "" if bound else f"registry has {stored.bundle_digest}"
        except (NotFound, DigestMismatch) as exc:
            bound, detail = False, str(exc)
        checks.append(VerificationCheck("bundle_binding", bound, detail))
    if expected_bundle_digest is not None:
        checks.append(
            VerificationCheck(
                "expected_bundle",
                obj.protocol.bundle_digest == expected_bundle_digest,
                f"evidence names {obj.protocol.bundle_digest}",
            )
        )
    if expected_artifact_digest is not None:
        checks.append(
            VerificationCheck(
                "expected_artifact",
                obj.implementation.artifact_digest == expected_artifact_digest,
                f"evidence names {obj.implementation.artifact_digest}",
            )
        )

    verdict = VerificationVerdict(tuple(checks))
    if not verdict.ok:
        logger.warning(
            "Evidence %s failed: %s", obj.evidence_id, ", ".join(c.name for c in checks if not c.passed)
        )
    return verdict

