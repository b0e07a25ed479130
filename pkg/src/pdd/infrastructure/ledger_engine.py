"""Runtime verification and the append-only, hash-linked runtime ledger.

The ledger is ``runtime-ledger.jsonl``: one canonical document per line,
LF-terminated. Line 0 is the genesis record embedding the admission
evidence; every later line is a signed attestation block whose
``previous_block_digest`` is the SHA-256 of the preceding line's bytes.
Raw interval traces live beside the ledger under ``traces/<hex>.json``.
"""
from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from contextlib import AbstractContextManager
from dataclasses import replace
from datetime import timedelta
from pathlib import Path

from pdd.config import RUNTIME_VERIFIER, SIGNATURE_SCHEME, EnforcementPolicy
from pdd.domain.errors import LedgerCorrupt, WriteFailure
from pdd.domain.models import (
    Attestation,
    AttestationInterval,
    ChainVerdict,
    DeployedImplementation,
    Document,
    EffectTrace,
    EnforcementAction,
    EvidenceObject,
    GenesisRecord,
    GuaranteeSurface,
    Ledger,
    LedgerBlock,
    RuntimeProjection,
    VerifierIdentity,
)
from pdd.domain.ports import Clock, Signer
from pdd.infrastructure.canonical import (
    canonical_bytes,
    digest_hex,
    document_digest,
    sha256_digest,
)
from pdd.infrastructure.documents import (
    block_from_document,
    block_payload,
    block_to_document,
    genesis_from_document,
    genesis_payload,
    genesis_to_document,
    trace_to_document,
)
from pdd.infrastructure.evidence_engine import dated_id, verify_evidence
from pdd.infrastructure.guarantee_compiler import p95
from pdd.infrastructure.signing import verify_signature
from pdd.infrastructure.storage import atomic_write, exclusive_lock

logger = logging.getLogger(__name__)

LEDGER_NAME = "runtime-ledger.jsonl"
LOCK_NAME = ".runtime-ledger.lock"
TRACES_DIR = "traces"
PASS = "pass"
VIOLATION = "violation"
DEFAULT_INTERVAL_SIZE = 100


def ledger_path(directory: str | Path) -> Path:
    return Path(directory) / LEDGER_NAME


# ── Projection and intervals ─────────────────────────────────────────


def project_monitorable(surface: GuaranteeSurface) -> RuntimeProjection:
    """Keep the clauses a trace alone can decide; list the rest as excluded."""
    return RuntimeProjection(
        clauses=tuple(c for c in surface.clauses if c.monitorable),
        excluded=tuple(c.clause_id for c in surface.clauses if not c.monitorable),
    )


def _slice(trace: EffectTrace, records, start, end) -> AttestationInterval:
    return AttestationInterval(
        observations=EffectTrace(invocations=tuple(records), started_at=start, ended_at=end),
        start=start,
        end=end,
    )


def split_intervals(
    trace: EffectTrace, size: int | None = None, seconds: float | None = None
) -> list[AttestationInterval]:
    """Cut *trace* into intervals by observation count (default) or time window.

    Time windows are aligned to ``trace.started_at``; records without a
    timestamp fall into the first window. Empty windows are skipped.
    """
    if size is not None and seconds is not None:
        raise ValueError("choose either an interval size or a window in seconds")
    records = list(trace.invocations)
    if not records:
        return [_slice(trace, [], trace.started_at, trace.ended_at)]

    if seconds is None:
        size = size or DEFAULT_INTERVAL_SIZE
        if size < 1:
            raise ValueError("interval size must be >= 1")
        intervals = []
        for offset in range(0, len(records), size):
            chunk = records[offset : offset + size]
            start = min((r.at for r in chunk if r.at is not None), default=trace.started_at)
            end = max((r.at for r in chunk if r.at is not None), default=trace.ended_at)
            intervals.append(_slice(trace, chunk, start, end))
        return intervals

    if seconds <= 0:
        raise ValueError("interval window must be positive")
    window = timedelta(seconds=seconds)
    buckets: dict[int, list] = {}
    for record in records:
        at = record.at or trace.started_at
        buckets.setdefault(int((at - trace.started_at) / window), []).append(record)
    intervals = []
    for index in sorted(buckets):
        start = trace.started_at + index * window
        end = max(start, min(start + window, trace.ended_at))
        intervals.append(_slice(trace, buckets[index], start, end))
    return intervals


# ── Reading ──────────────────────────────────────────────────────────


def _raw_lines(path: Path) -> tuple[list[bytes], bool]:
    """Split the ledger into record lines; the flag is False when the last lacks its LF."""
    data = path.read_bytes()
    if not data:
        return [], True
    lines = data.split(b"\n")
    terminated = lines[-1] == b""
    if terminated:
        lines.pop()
    return lines, terminated


def _decode_line(line: bytes, index: int) -> Document:
    try:
        doc = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LedgerCorrupt(f"line {index} is not a JSON document: {exc}", index) from exc
    if not isinstance(doc, dict) or canonical_bytes(doc) != line:
        raise LedgerCorrupt(f"line {index} is not in canonical form", index)
    return doc


def read_ledger(directory: str | Path) -> Ledger:
    """Parse the ledger in *directory*; malformed lines raise ``LedgerCorrupt``."""
    path = ledger_path(directory)
    if not path.exists():
        raise LedgerCorrupt(f"No ledger at {path}", 0)
    lines, terminated = _raw_lines(path)
    if not lines:
        raise LedgerCorrupt(f"{path} is empty", 0)
    if not terminated:
        raise LedgerCorrupt("last record is not LF-terminated", len(lines) - 1)
    try:
        genesis = genesis_from_document(_decode_line(lines[0], 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise LedgerCorrupt(f"genesis record is malformed: {exc}", 0) from exc
    blocks = []
    for index, line in enumerate(lines[1:], start=1):
        try:
            blocks.append(block_from_document(_decode_line(line, index)))
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerCorrupt(f"block {index} is malformed: {exc}", index) from exc
    return Ledger(path=str(path), genesis=genesis, blocks=tuple(blocks))


def head_digest(ledger: Ledger) -> str:
    if ledger.blocks:
        return document_digest(block_to_document(ledger.blocks[-1]))
    return document_digest(genesis_to_document(ledger.genesis))


# ── Writing ──────────────────────────────────────────────────────────


def init_ledger(directory: str | Path, evidence: EvidenceObject, signer: Signer) -> Ledger:
    """Start a ledger whose genesis record embeds the admission *evidence*."""
    path = ledger_path(directory)
    unsigned = GenesisRecord(
        ledger_block_id=f"{evidence.evidence_id}_genesis",
        evidence=evidence,
        issuer=signer.issuer,
        signature_scheme=signer.scheme,
        signature="",
    )
    with ledger_lock(directory):
        if path.exists() and path.stat().st_size:
            raise WriteFailure(f"{path} already exists; a ledger has exactly one genesis")
        genesis = replace(unsigned, signature=signer.sign(canonical_bytes(genesis_payload(unsigned))))
        atomic_write(path, canonical_bytes(genesis_to_document(genesis)) + b"\n")
    logger.info("Initialised ledger %s from %s", path, evidence.evidence_id)
    return Ledger(path=str(path), genesis=genesis, blocks=())


def ledger_lock(directory: str | Path) -> AbstractContextManager[None]:
    """The single-writer lock of the ledger in *directory*."""
    return exclusive_lock(Path(directory) / LOCK_NAME)


def _append_line(path: Path, line: bytes) -> None:
    try:
        with open(path, "ab") as fh:
            fh.write(line + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise WriteFailure(f"Cannot append to {path}: {exc}") from exc


def _store_trace(directory: Path, trace: EffectTrace) -> tuple[str, str]:
    data = canonical_bytes(trace_to_document(trace))
    digest = sha256_digest(data)
    location = f"{TRACES_DIR}/{digest_hex(digest)}.json"
    if not (directory / location).exists():
        atomic_write(directory / location, data)
    return digest, location


def attest_interval(
    ledger: Ledger,
    projection: RuntimeProjection,
    interval: AttestationInterval,
    policy: EnforcementPolicy,
    clock: Clock,
    signer: Signer,
    trust: Mapping[str, str],
    deployed_version: str | None = None,
) -> LedgerBlock:
    """Judge *interval* against *projection* and append one signed block.

    The whole step runs under the ledger lock: the chain on disk is
    re-read and re-verified, then the block is numbered, linked to the
    current head, signed and appended. A broken chain raises
    ``LedgerCorrupt`` and nothing is written. A violation names the first
    failing clause in projection order, and within it the first offending
    observation.
    """
    directory = Path(ledger.path).parent
    trace = interval.observations

    failing = None
    for clause in projection.clauses:
        outcome = clause.evaluate(trace)
        if not outcome.passed:
            failing = (clause, outcome)
            break

    with ledger_lock(directory):
        verdict = verify_chain(directory, trust)
        if not verdict.ok:
            raise LedgerCorrupt(f"Refusing to append: {verdict.reason}", verdict.failed_index)
        current = read_ledger(directory)
        digest, location = _store_trace(directory, trace)

        sequence = current.length
        block_id = f"evd_{interval.start.strftime('%Y_%m_%d')}_runtime_{sequence:04d}"
        if failing is None:
            attestation = Attestation(
                decision=PASS,
                trace_digest=digest,
                raw_trace_location=location,
                summary={
                    "observations": len(trace.invocations),
                    "max_latency_ms_p95": p95([r.latency_ms for r in trace.invocations]),
                },
            )
            action = EnforcementAction("none")
        else:
            clause, outcome = failing
            attestation = Attestation(
                decision=VIOLATION,
                trace_digest=digest,
                raw_trace_location=location,
                violated_invariant=clause.clause_id,
                category=clause.category,
                observed_value=outcome.observed_value,
                allowed_value=outcome.allowed_value,
            )
            action = EnforcementAction(
                policy.action_for(clause.category),
                dated_id("repairctx", interval.start, sequence, 4),
            )

        evidence = current.genesis.evidence
        unsigned = LedgerBlock(
            ledger_block_id=block_id,
            previous_block_digest=head_digest(current),
            protocol_id=evidence.protocol.protocol_id,
            protocol_version=evidence.protocol.version,
            implementation=DeployedImplementation(
                artifact_digest=evidence.implementation.artifact_digest,
                deployed_version=deployed_version or evidence.implementation.artifact_id,
            ),
            runtime_verifier=VerifierIdentity(*RUNTIME_VERIFIER),
            interval_start=interval.start,
            interval_end=interval.end,
            attestation=attestation,
            action=action,
            issuer=signer.issuer,
            signature_scheme=signer.scheme,
            signature="",
        )
        block = replace(unsigned, signature=signer.sign(canonical_bytes(block_payload(unsigned))))
        _append_line(Path(current.path), canonical_bytes(block_to_document(block)))

    if block.attestation.decision == VIOLATION:
        logger.warning(
            "Block %s: violation of %s (observed %s, allowed %s), action %s",
            block.ledger_block_id,
            attestation.violated_invariant,
            attestation.observed_value,
            attestation.allowed_value,
            action.runtime,
        )
    else:
        logger.info("Block %s: pass over %d observation(s)", block.ledger_block_id, len(trace.invocations))
    return block


# ── Verification ─────────────────────────────────────────────────────


def _signed_by_trusted(doc: Document, trust: Mapping[str, str]) -> str | None:
    """Return why the signature on *doc* fails, or None when it verifies."""
    if doc.get("signature_scheme") != SIGNATURE_SCHEME:
        return f"unsupported signature scheme '{doc.get('signature_scheme')}'"
    key = trust.get(doc.get("issuer", ""))
    if key is None:
        return f"issuer '{doc.get('issuer')}' is not trusted"
    payload = {k: v for k, v in doc.items() if k != "signature"}
    if not verify_signature(key, canonical_bytes(payload), str(doc.get("signature", ""))):
        return "signature does not verify"
    return None


def _check_genesis(doc: Document, trust: Mapping[str, str]) -> str | None:
    if doc.get("genesis") is not True or doc.get("previous_block_digest") is not None:
        return "first record is not a genesis record"
    genesis = genesis_from_document(doc)
    if genesis_payload(genesis) != {k: v for k, v in doc.items() if k != "signature"}:
        return "genesis record does not match its embedded evidence"
    evidence_verdict = verify_evidence(genesis.evidence, trust, None)
    if not evidence_verdict.ok:
        failed = ", ".join(c.name for c in evidence_verdict.checks if not c.passed)
        return f"genesis evidence does not verify ({failed})"
    return _signed_by_trusted(doc, trust)


def _check_block(
    doc: Document, previous: bytes, genesis: GenesisRecord, directory: Path, trust: Mapping[str, str]
) -> str | None:
    if doc.get("genesis"):
        return "a second genesis record"
    block = block_from_document(doc)
    if block_payload(block) != {k: v for k, v in doc.items() if k != "signature"}:
        return "block has unexpected fields"
    reason = _signed_by_trusted(doc, trust)
    if reason:
        return reason
    if block.previous_block_digest != sha256_digest(previous):
        return "previous_block_digest does not match the preceding record"
    protocol = genesis.evidence.protocol
    if (block.protocol_id, block.protocol_version) != (protocol.protocol_id, protocol.version):
        return "block names a different protocol than the genesis evidence"
    a = block.attestation
    if a.decision not in (PASS, VIOLATION):
        return f"unknown decision '{a.decision}'"
    if a.decision == VIOLATION and not a.violated_invariant:
        return "violation block without violated_invariant"
    if a.decision == PASS and block.action.runtime != "none":
        return "pass block with an enforcement action"
    trace_file = (directory / a.raw_trace_location).resolve()
    if not trace_file.is_relative_to(directory.resolve()) or not trace_file.is_file():
        return f"raw trace {a.raw_trace_location} is missing"
    if sha256_digest(trace_file.read_bytes()) != a.trace_digest:
        return f"raw trace {a.raw_trace_location} does not match trace_digest"
    return None


def verify_chain(ledger: Ledger | str | Path, trust: Mapping[str, str]) -> ChainVerdict:
    """Verify genesis evidence, every signature, link and trace digest.

    Reads the ledger file itself so that any on-disk byte change is caught;
    *ledger* may be a ``Ledger`` or the directory holding one.
    """
    path = Path(ledger.path) if isinstance(ledger, Ledger) else ledger_path(ledger)
    directory = path.parent
    if not path.exists():
        return ChainVerdict(ok=False, length=0, failed_index=0, reason=f"no ledger at {path}")
    lines, terminated = _raw_lines(path)
    if not lines:
        return ChainVerdict(ok=False, length=0, failed_index=0, reason="ledger is empty")

    genesis: GenesisRecord | None = None
    for index, line in enumerate(lines):
        try:
            if index == len(lines) - 1 and not terminated:
                raise LedgerCorrupt("last record is not LF-terminated", index)
            doc = _decode_line(line, index)
            if index == 0:
                reason = _check_genesis(doc, trust)
                genesis = genesis_from_document(doc)
            else:
                reason = _check_block(doc, lines[index - 1], genesis, directory, trust)
        except LedgerCorrupt as exc:
            reason = str(exc)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            reason = f"malformed record: {exc}"
        if reason is not None:
            logger.warning("Ledger %s fails at index %d: %s", path, index, reason)
            return ChainVerdict(ok=False, length=len(lines), failed_index=index, reason=reason)
    return ChainVerdict(ok=True, length=len(lines))
