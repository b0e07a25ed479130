"""Conversion between domain values and canonical documents.

Field names follow the on-disk evidence, ledger and trace formats exactly.
"""
from __future__ import annotations

from typing import Any

from pdd.domain.models import (
    MANIFEST_NAME,
    Attestation,
    BundleDocument,
    DeployedImplementation,
    DiscoveryLog,
    Document,
    EffectEvent,
    EffectTrace,
    EnforcementAction,
    ErrorOutcome,
    EvidenceObject,
    EvidencePointer,
    FailedClause,
    GenesisRecord,
    ImplementationBinding,
    InvocationRecord,
    LedgerBlock,
    Outcome,
    ProtocolBinding,
    RejectionReport,
    RepairContext,
    SealedBundle,
    ValidatorSummary,
    VerifierIdentity,
)
from pdd.infrastructure.canonical import format_utc, parse_utc

# ── Traces ───────────────────────────────────────────────────────────


def outcome_to_document(outcome: Outcome) -> Document:
    if outcome.error is not None:
        return {"error": {"kind": outcome.error.kind, "message": outcome.error.message}}
    return {"response": outcome.response}


def outcome_from_document(doc: Document) -> Outcome:
    if "error" in doc:
        return Outcome(error=ErrorOutcome(doc["error"]["kind"], doc["error"].get("message", "")))
    return Outcome(response=doc["response"])


def effect_to_document(effect: EffectEvent) -> Document:
    return {
        "kind": effect.kind,
        "target": effect.target,
        "post_response": effect.post_response,
        "mutating": effect.mutating,
    }


def invocation_to_document(record: InvocationRecord) -> Document:
    return {
        "seq": record.seq,
        "at": format_utc(record.at) if record.at else None,
        "request": record.request,
        "outcome": outcome_to_document(record.outcome),
        "effects": [effect_to_document(e) for e in record.effects],
        "latency_ms": record.latency_ms,
        "peak_memory_mb": record.peak_memory_mb,
        "timed_out": record.timed_out,
    }


def invocation_from_document(doc: Document) -> InvocationRecord:
    return InvocationRecord(
        seq=doc["seq"],
        request=doc["request"],
        outcome=outcome_from_document(doc["outcome"]),
        effects=tuple(
            EffectEvent(e["kind"], e["target"], e.get("post_response", False), e.get("mutating", False))
            for e in doc.get("effects", [])
        ),
        latency_ms=doc.get("latency_ms", 0),
        peak_memory_mb=doc.get("peak_memory_mb", 0),
        at=parse_utc(doc["at"]) if doc.get("at") else None,
        timed_out=doc.get("timed_out", False),
    )


def trace_to_document(trace: EffectTrace) -> Document:
    return {
        "started_at": format_utc(trace.started_at),
        "ended_at": format_utc(trace.ended_at),
        "invocations": [invocation_to_document(r) for r in trace.invocations],
    }


def trace_from_document(doc: Document) -> EffectTrace:
    return EffectTrace(
        invocations=tuple(invocation_from_document(d) for d in doc.get("invocations", [])),
        started_at=parse_utc(doc["started_at"]),
        ended_at=parse_utc(doc["ended_at"]),
    )


# ── Bundles ──────────────────────────────────────────────────────────


def bundle_content_document(documents: tuple[BundleDocument, ...]) -> Document:
    """The sealed content: manifest plus every invariant file, in manifest order."""
    return {
        "manifest": documents[0].content,
        "files": [{"path": d.path, "content": d.content} for d in documents[1:]],
    }


def documents_from_content(content: Document) -> tuple[BundleDocument, ...]:
    return (BundleDocument(MANIFEST_NAME, content["manifest"]),) + tuple(
        BundleDocument(f["path"], f["content"]) for f in content["files"]
    )


def sealed_to_document(sealed: SealedBundle) -> Document:
    return {
        "protocol_id": sealed.protocol_id,
        "version": sealed.version,
        "bundle_digest": sealed.bundle_digest,
        "sealed_at": format_utc(sealed.sealed_at),
        "content": bundle_content_document(sealed.bundle.documents),
    }


# ── Evidence ─────────────────────────────────────────────────────────


def _protocol_doc(p: ProtocolBinding) -> Document:
    return {"protocol_id": p.protocol_id, "version": p.version, "bundle_digest": p.bundle_digest}


def _implementation_doc(i: ImplementationBinding) -> Document:
    return {
        "artifact_id": i.artifact_id,
        "artifact_digest": i.artifact_digest,
        "language": i.language,
        "runtime": i.runtime,
    }


def _validator_summary_doc(v: ValidatorSummary) -> Document:
    return {"name": v.name, "version": v.version, "result": v.result, **v.metrics}


def _validator_summary_from(doc: Document) -> ValidatorSummary:
    metrics = {k: v for k, v in doc.items() if k not in ("name", "version", "result")}
    return ValidatorSummary(doc["name"], doc["version"], doc["result"], metrics)


def evidence_payload(obj: EvidenceObject) -> Document:
    """Every evidence field except the signature; this is what gets signed."""
    return {
        "evidence_id": obj.evidence_id,
        "protocol": _protocol_doc(obj.protocol),
        "implementation": _implementation_doc(obj.implementation),
        "validators": [_validator_summary_doc(v) for v in obj.validators],
        "decision": obj.decision,
        "issued_at": format_utc(obj.issued_at),
        "issuer": obj.issuer,
        "signature_scheme": obj.signature_scheme,
        "trace_digests": list(obj.trace_digests),
        "discovery_log_digest": obj.discovery_log_digest,
    }


def evidence_to_document(obj: EvidenceObject) -> Document:
    return {**evidence_payload(obj), "signature": obj.signature}


def evidence_from_document(doc: Document) -> EvidenceObject:
    return EvidenceObject(
        evidence_id=doc["evidence_id"],
        protocol=ProtocolBinding(**doc["protocol"]),
        implementation=ImplementationBinding(**doc["implementation"]),
        validators=tuple(_validator_summary_from(v) for v in doc["validators"]),
        decision=doc["decision"],
        issued_at=parse_utc(doc["issued_at"]),
        issuer=doc["issuer"],
        signature_scheme=doc["signature_scheme"],
        trace_digests=tuple(doc.get("trace_digests", [])),
        discovery_log_digest=doc.get("discovery_log_digest", ""),
        signature=doc["signature"],
    )


def rejection_to_document(report: RejectionReport) -> Document:
    return {
        "report_id": report.report_id,
        "protocol": _protocol_doc(report.protocol),
        "implementation": _implementation_doc(report.implementation),
        "validators": [_validator_summary_doc(v) for v in report.validators],
        "failed_clauses": [_failed_clause_doc(f) for f in report.failed_clauses],
        "issued_at": format_utc(report.issued_at),
        "issuer": report.issuer,
        "trace_digests": list(report.trace_digests),
        "discovery_log_digest": report.discovery_log_digest,
    }


def _failed_clause_doc(f: FailedClause) -> Document:
    doc: Document = {"validator": f.validator, "clause_id": f.clause_id}
    for key in ("path", "observed_value", "allowed_value"):
        value = getattr(f, key)
        if value is not None:
            doc[key] = value
    if f.detail:
        doc["detail"] = f.detail
    return doc


def discovery_log_to_document(log: DiscoveryLog) -> Document:
    return {
        "implementation": {
            "artifact_id": log.artifact_id,
            "artifact_digest": log.artifact_digest,
            "language": log.language,
            "runtime": log.runtime,
        },
        "dependency_graph": [
            {"name": p.name, "version": p.version, "digest": p.digest} for p in log.dependency_graph
        ],
        "generated_files": [{"path": f.path, "digest": f.digest} for f in log.generated_files],
        "validators": [{"name": n, "version": v} for n, v in log.validators],
        "property_coverage": {
            "run": log.properties_run,
            "declared": log.properties_declared,
            "ratio": log.property_coverage,
        },
        "resource_usage": dict(log.resource_usage),
        "derived_behaviors": list(log.derived_behaviors),
    }


# ── Ledger ───────────────────────────────────────────────────────────


def block_payload(block: LedgerBlock) -> Document:
    attestation: Document = {
        "decision": block.attestation.decision,
        "trace_digest": block.attestation.trace_digest,
        "raw_trace_location": block.attestation.raw_trace_location,
    }
    a = block.attestation
    for key in ("violated_invariant", "category", "observed_value", "allowed_value", "summary"):
        value = getattr(a, key)
        if value is not None:
            attestation[key] = value
    action: Document = {"runtime": block.action.runtime}
    if block.action.remediation_context is not None:
        action["remediation_context"] = block.action.remediation_context
    return {
        "ledger_block_id": block.ledger_block_id,
        "previous_block_digest": block.previous_block_digest,
        "protocol": {"protocol_id": block.protocol_id, "version": block.protocol_version},
        "implementation": {
            "artifact_digest": block.implementation.artifact_digest,
            "deployed_version": block.implementation.deployed_version,
        },
        "runtime_verifier": {"name": block.runtime_verifier.name, "version": block.runtime_verifier.version},
        "interval": {"start": format_utc(block.interval_start), "end": format_utc(block.interval_end)},
        "attestation": attestation,
        "action": action,
        "issuer": block.issuer,
        "signature_scheme": block.signature_scheme,
    }


def block_to_document(block: LedgerBlock) -> Document:
    return {**block_payload(block), "signature": block.signature}


def block_from_document(doc: Document) -> LedgerBlock:
    a = doc["attestation"]
    return LedgerBlock(
        ledger_block_id=doc["ledger_block_id"],
        previous_block_digest=doc["previous_block_digest"],
        protocol_id=doc["protocol"]["protocol_id"],
        protocol_version=doc["protocol"]["version"],
        implementation=DeployedImplementation(**doc["implementation"]),
        runtime_verifier=VerifierIdentity(**doc["runtime_verifier"]),
        interval_start=parse_utc(doc["interval"]["start"]),
        interval_end=parse_utc(doc["interval"]["end"]),
        attestation=Attestation(
            decision=a["decision"],
            trace_digest=a["trace_digest"],
            raw_trace_location=a["raw_trace_location"],
            violated_invariant=a.get("violated_invariant"),
            category=a.get("category"),
            observed_value=a.get("observed_value"),
            allowed_value=a.get("allowed_value"),
            summary=a.get("summary"),
        ),
        action=EnforcementAction(doc["action"]["runtime"], doc["action"].get("remediation_context")),
        issuer=doc["issuer"],
        signature_scheme=doc["signature_scheme"],
        signature=doc["signature"],
    )


def genesis_payload(genesis: GenesisRecord) -> Document:
    ev = genesis.evidence
    return {
        "ledger_block_id": genesis.ledger_block_id,
        "genesis": True,
        "previous_block_digest": None,
        "protocol": {"protocol_id": ev.protocol.protocol_id, "version": ev.protocol.version},
        "implementation": {"artifact_digest": ev.implementation.artifact_digest},
        "evidence": evidence_to_document(ev),
        "issuer": genesis.issuer,
        "signature_scheme": genesis.signature_scheme,
    }


def genesis_to_document(genesis: GenesisRecord) -> Document:
    return {**genesis_payload(genesis), "signature": genesis.signature}


def genesis_from_document(doc: Document) -> GenesisRecord:
    return GenesisRecord(
        ledger_block_id=doc["ledger_block_id"],
        evidence=evidence_from_document(doc["evidence"]),
        issuer=doc["issuer"],
        signature_scheme=doc["signature_scheme"],
        signature=doc["signature"],
    )


# ── Remediation ──────────────────────────────────────────────────────


def repair_context_to_document(ctx: RepairContext) -> Document:
    return {
        "context_id": ctx.context_id,
        "violated_clause": {
            "clause_id": ctx.violated_clause,
            "declaration": ctx.clause_declaration,
            "category": ctx.category,
            "observed_value": ctx.observed_value,
            "allowed_value": ctx.allowed_value,
        },
        "protocol": _protocol_doc(ctx.protocol),
        "implementation": {
            "artifact_digest": ctx.implementation.artifact_digest,
            "deployed_version": ctx.implementation.deployed_version,
        },
        "evidence": {
            "ledger_block_id": ctx.evidence.ledger_block_id,
            "trace_digest": ctx.evidence.trace_digest,
            "raw_trace_location": ctx.evidence.raw_trace_location,
        },
        "environment": dict(ctx.environment),
        "ledger_head_digest": ctx.ledger_head_digest,
        "created_at": format_utc(ctx.created_at),
    }


def repair_context_from_document(doc: Document) -> RepairContext:
    clause = doc["violated_clause"]
    return RepairContext(
        context_id=doc["context_id"],
        violated_clause=clause["clause_id"],
        clause_declaration=clause["declaration"],
        category=clause.get("category"),
        observed_value=clause.get("observed_value"),
        allowed_value=clause.get("allowed_value"),
        protocol=ProtocolBinding(**doc["protocol"]),
        implementation=DeployedImplementation(**doc["implementation"]),
        evidence=EvidencePointer(**doc["evidence"]),
        environment=dict(doc.get("environment", {})),
        ledger_head_digest=doc["ledger_head_digest"],
        created_at=parse_utc(doc["created_at"]),
    )


def to_document(item: Any) -> Document:
    """Dispatch for the artifact classes the evidence store accepts."""
    if isinstance(item, EvidenceObject):
        return evidence_to_document(item)
    if isinstance(item, RejectionReport):
        return rejection_to_document(item)
    if isinstance(item, RepairContext):
        return repair_context_to_document(item)
    if isinstance(item, DiscoveryLog):
        return discovery_log_to_document(item)
    if isinstance(item, EffectTrace):
        return trace_to_document(item)
    if isinstance(item, dict):
        return item
    raise TypeError(f"Cannot store {type(item).__name__}")
