"""Turn violation blocks into repair contexts and send repairs back through admission."""
from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from pathlib import Path

import yaml

from pdd.domain.errors import NotAViolation, NotFound, ProtocolMismatch, UnresolvedClause
from pdd.domain.models import (
    EvidencePointer,
    LedgerBlock,
    PropertyRun,
    ProtocolBinding,
    RepairContext,
    SealedBundle,
    ValidationRun,
)
from pdd.domain.ports import BundleRegistry, Clock, SessionFactory
from pdd.infrastructure.documents import repair_context_from_document, repair_context_to_document
from pdd.infrastructure.evidence_engine import dated_id, next_sequence
from pdd.infrastructure.guarantee_compiler import compile_guarantees
from pdd.infrastructure.ledger_engine import VIOLATION
from pdd.infrastructure.storage import write_canonical
from pdd.infrastructure.validation_engine import validate

logger = logging.getLogger(__name__)


def build_repair_context(
    block: LedgerBlock,
    sealed: SealedBundle,
    store_dir: str | Path,
    clock: Clock,
    ledger_head_digest: str,
    environment: Mapping[str, str] | None = None,
) -> RepairContext:
    """Write ``<context_id>.json`` into *store_dir* for a violation *block*.

    The context id is the one the block already announced in its action,
    so the ledger and the stored context point at each other.
    """
    if block.attestation.decision != VIOLATION:
        raise NotAViolation(f"{block.ledger_block_id} is a '{block.attestation.decision}' block")
    if (sealed.protocol_id, sealed.version) != (block.protocol_id, block.protocol_version):
        raise ProtocolMismatch(
            f"{block.ledger_block_id} attests {block.protocol_id}@{block.protocol_version}, "
            f"not {sealed.protocol_id}@{sealed.version}"
        )
    clause_id = block.attestation.violated_invariant or ""
    clause = compile_guarantees(sealed).clause(clause_id)
    if clause is None:
        raise UnresolvedClause(f"'{clause_id}' is not a clause of {sealed.protocol_id}@{sealed.version}")

    store = Path(store_dir)
    if not (store / block.attestation.raw_trace_location).is_file():
        raise NotFound(f"raw trace {block.attestation.raw_trace_location} is not in {store}")

    now = clock.now()
    context_id = block.action.remediation_context or dated_id(
        "repairctx", now, next_sequence(store, "repairctx", now), 4
    )
    context = RepairContext(
        context_id=context_id,
        violated_clause=clause_id,
        clause_declaration=yaml.safe_dump(clause.declaration, sort_keys=False, default_flow_style=False),
        category=clause.category,
        observed_value=block.attestation.observed_value,
        allowed_value=block.attestation.allowed_value,
        protocol=ProtocolBinding(sealed.protocol_id, sealed.version, sealed.bundle_digest),
        implementation=block.implementation,
        evidence=EvidencePointer(
            ledger_block_id=block.ledger_block_id,
            trace_digest=block.attestation.trace_digest,
            raw_trace_location=block.attestation.raw_trace_location,
        ),
        environment=dict(environment or {}),
        ledger_head_digest=ledger_head_digest,
        created_at=now,
    )
    write_canonical(store / f"{context_id}.json", repair_context_to_document(context))
    logger.info("Wrote repair context %s for %s", context_id, clause_id)
    return context


def load_repair_context(path: str | Path) -> RepairContext:
    return repair_context_from_document(json.loads(Path(path).read_text(encoding="utf-8")))


def resubmit(
    context: RepairContext,
    session_factory: SessionFactory,
    registry: BundleRegistry,
    run: PropertyRun,
) -> ValidationRun:
    """Validate a repaired candidate against the exact bundle the context is bound to.

    The bundle is fetched by digest so a newer version of the protocol can
    never be substituted. The result is an ordinary validation run.
    """
    sealed = registry.get_by_digest(context.protocol.bundle_digest)
    logger.info("Resubmitting against %s for %s", sealed.bundle_digest, context.context_id)
    return validate(sealed, session_factory, run)
