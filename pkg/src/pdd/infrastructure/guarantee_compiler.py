"""Compiles a sealed bundle into one executable predicate per declared clause.

Every predicate judges a whole ``EffectTrace`` and reports the first failing
observation in trace order. Clause order is structural, then behavioral in
declaration order, then operational in manifest order.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable
from typing import Any

from pdd.domain.errors import UnsupportedPropertyKind
from pdd.domain.models import (
    AUTHORITY_VIOLATION,
    BEHAVIORAL,
    BEHAVIORAL_DRIFT,
    OPERATIONAL,
    OPERATIONAL_DEGRADATION,
    STRUCTURAL,
    STRUCTURAL_DRIFT,
    BehavioralProperty,
    CapabilityManifest,
    ClauseOutcome,
    CompiledClause,
    Counterexample,
    Document,
    EffectTrace,
    GuaranteeSurface,
    InvocationRecord,
    SealedBundle,
    StructuralSchema,
)
from pdd.infrastructure.canonical import canonical_bytes
from pdd.infrastructure.documents import outcome_to_document
from pdd.infrastructure.schema_engine import validate_document

logger = logging.getLogger(__name__)

STRUCTURAL_CLAUSE_IDS = ("request", "response", "errors")
TIMEOUT_ERROR_KIND = "invocation_timeout"

# Kinds that can be judged from passively observed traffic alone.
MONITORABLE_KINDS = ("range", "fails_closed")

Predicate = Callable[[EffectTrace], ClauseOutcome]


def budget_clause_id(stem: str) -> str:
    return f"max_{stem.replace('-', '_')}_calls_per_request"


def operational_clause_ids(manifest: CapabilityManifest) -> list[str]:
    ids = ["network_outbound", "filesystem", "dependencies"]
    if manifest.max_latency_ms_p95 is not None:
        ids.append("max_latency_ms_p95")
    if manifest.max_memory_mb is not None:
        ids.append("max_memory_mb")
    ids.extend(budget_clause_id(stem) for stem in manifest.per_request_call_budgets)
    ids.extend(["secrets", "background_work"])
    return ids


def matches_stem(target: str, stem: str) -> bool:
    """True when an effect target counts against the budget named by *stem*."""
    host = target.rsplit(":", 1)[0] if ":" in target and "/" not in target else target
    if host == stem or host.startswith(stem + "."):
        return True
    return stem in [segment for segment in target.split("/") if segment]


def within_prefixes(path: str, prefixes: Iterable[str]) -> bool:
    for prefix in prefixes:
        base = prefix.rstrip("/")
        if path == prefix or path == base or path.startswith(base + "/"):
            return True
    return False


def p95(values: list[float]) -> float:
    """Nearest-rank 95th percentile; 0 for an empty sample."""
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, math.ceil(0.95 * len(ordered)))
    return ordered[rank - 1]


def _ok(clause_id: str) -> ClauseOutcome:
    return ClauseOutcome(clause_id=clause_id, passed=True)


def _number(value: Any) -> int | float | None:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return value
    return None


def _outcome_key(record: InvocationRecord) -> bytes:
    return canonical_bytes(outcome_to_document(record.outcome))


# ── Structural ───────────────────────────────────────────────────────


def _request_clause(schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            violations = validate_document(schema.request, record.request, "/request")
            if not violations:
                continue
            if record.outcome.is_error and record.outcome.error.kind in schema.errors:
                continue
            first = violations[0]
            return ClauseOutcome(
                clause_id="request",
                passed=False,
                path=first.path,
                detail=f"invalid request answered without a declared error: {first.message}",
                observation_seq=record.seq,
            )
        return _ok("request")

    return check


def _response_clause(schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            if record.outcome.is_error:
                continue
            violations = validate_document(schema.response, record.outcome.response, "/response")
            if violations:
                first = violations[0]
                return ClauseOutcome(
                    clause_id="response",
                    passed=False,
                    path=first.path,
                    observed_value=_number(first.observed),
                    allowed_value=_number(first.allowed),
                    detail=first.message,
                    observation_seq=record.seq,
                )
        return _ok("response")

    return check


def _errors_clause(schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            error = record.outcome.error
            if error is not None and error.kind not in schema.errors:
                return ClauseOutcome(
                    clause_id="errors",
                    passed=False,
                    path="/error/kind",
                    detail=f"undeclared error kind '{error.kind}'",
                    observation_seq=record.seq,
                )
        return _ok("errors")

    return check


# ── Behavioral ───────────────────────────────────────────────────────


def _determinism(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        seen: dict[bytes, InvocationRecord] = {}
        for record in trace.invocations:
            if record.timed_out:
                continue
            key = canonical_bytes(record.request)
            first = seen.setdefault(key, record)
            if first is not record and _outcome_key(first) != _outcome_key(record):
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    counterexample=Counterexample(
                        inputs=(record.request,),
                        observed=[outcome_to_document(first.outcome), outcome_to_document(record.outcome)],
                        expected="identical outcomes",
                    ),
                    detail="same request produced different outcomes",
                    observation_seq=record.seq,
                )
        return _ok(prop.name)

    return check


def _range(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    field = prop.target_field
    lo, hi = prop.bounds

    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            if record.outcome.is_error:
                continue
            response = record.outcome.response or {}
            value = _number(response.get(field))
            if value is None:
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    path=f"/response/{field}",
                    detail=f"'{field}' missing or not a number",
                    observation_seq=record.seq,
                )
            bound = lo if lo is not None and value < lo else hi if hi is not None and value > hi else None
            if bound is not None:
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    counterexample=Counterexample(
                        inputs=(record.request,), observed=value, expected=f"[{lo}, {hi}]"
                    ),
                    observed_value=value,
                    allowed_value=bound,
                    path=f"/response/{field}",
                    observation_seq=record.seq,
                )
        return _ok(prop.name)

    return check


def _monotone(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    varied = prop.varied_field
    target = prop.target_field
    decreasing = prop.direction == "non_increasing"

    def check(trace: EffectTrace) -> ClauseOutcome:
        groups: dict[bytes, list[tuple[float, float, InvocationRecord]]] = {}
        for record in trace.invocations:
            if record.outcome.is_error:
                continue
            x = _number(record.request.get(varied))
            y = _number((record.outcome.response or {}).get(target))
            if x is None or y is None:
                continue
            rest = {k: v for k, v in record.request.items() if k != varied}
            groups.setdefault(canonical_bytes(rest), []).append((x, y, record))

        first_failure: tuple[InvocationRecord, InvocationRecord] | None = None
        for points in groups.values():
            points.sort(key=lambda p: (p[0], p[2].seq))
            # Extreme output among strictly smaller inputs seen so far.
            best: tuple[float, InvocationRecord] | None = None
            i = 0
            while i < len(points):
                j = i
                while j < len(points) and points[j][0] == points[i][0]:
                    j += 1
                if best is not None:
                    for x, y, record in points[i:j]:
                        if (y > best[0]) if decreasing else (y < best[0]):
                            if first_failure is None or record.seq < first_failure[1].seq:
                                first_failure = (best[1], record)
                for x, y, record in points[i:j]:
                    if best is None or ((y < best[0]) if decreasing else (y > best[0])):
                        best = (y, record)
                i = j

        if first_failure is None:
            return _ok(prop.name)
        low, high = first_failure
        return ClauseOutcome(
            clause_id=prop.name,
            passed=False,
            counterexample=Counterexample(
                inputs=(low.request, high.request),
                observed=[low.outcome.response.get(target), high.outcome.response.get(target)],
                expected=prop.direction,
            ),
            detail=f"{target} moved against {prop.direction} as {varied} grew",
            observation_seq=high.seq,
        )

    return check


def _fails_closed(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    required = schema.request.required
    kind = prop.error_kind

    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            missing = [name for name in required if name not in record.request]
            if not missing:
                continue
            error = record.outcome.error
            if error is None or error.kind != kind:
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    counterexample=Counterexample(
                        inputs=(record.request,),
                        observed=outcome_to_document(record.outcome),
                        expected={"error": {"kind": kind}},
                    ),
                    path=f"/request/{missing[0]}",
                    detail=f"request without '{missing[0]}' was not rejected with {kind}",
                    observation_seq=record.seq,
                )
        return _ok(prop.name)

    return check


def _idempotent_output(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        produced: dict[bytes, InvocationRecord] = {}
        for record in trace.invocations:
            key = canonical_bytes(record.request)
            earlier = produced.get(key)
            if earlier is not None and canonical_bytes(
                outcome_to_document(record.outcome)
            ) != canonical_bytes({"response": earlier.outcome.response}):
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    counterexample=Counterexample(
                        inputs=(earlier.request, record.request),
                        observed=outcome_to_document(record.outcome),
                        expected={"response": earlier.outcome.response},
                    ),
                    detail="applying the handler to its own output changed the result",
                    observation_seq=record.seq,
                )
            if not record.outcome.is_error:
                produced.setdefault(canonical_bytes(record.outcome.response), record)
        return _ok(prop.name)

    return check


def _idempotent_stateful(prop: BehavioralProperty, schema: StructuralSchema) -> Predicate:
    def check(trace: EffectTrace) -> ClauseOutcome:
        seen: dict[bytes, InvocationRecord] = {}
        for record in trace.invocations:
            if record.timed_out:
                continue
            key = canonical_bytes(record.request)
            first = seen.setdefault(key, record)
            if first is record:
                continue
            mutations = [e for e in record.effects if e.mutating or e.kind == "fs_write"]
            if _outcome_key(first) != _outcome_key(record) or mutations:
                return ClauseOutcome(
                    clause_id=prop.name,
                    passed=False,
                    counterexample=Counterexample(
                        inputs=(record.request,),
                        observed={
                            "outcome": outcome_to_document(record.outcome),
                            "mutating_effects": len(mutations),
                        },
                        expected={"outcome": outcome_to_document(first.outcome), "mutating_effects": 0},
                    ),
                    observed_value=len(mutations),
                    allowed_value=0,
                    detail="replayed request changed the outcome or mutated state",
                    observation_seq=record.seq,
                )
        return _ok(prop.name)

    return check


_BEHAVIORAL_BUILDERS: dict[str, Callable[[BehavioralProperty, StructuralSchema], Predicate]] = {
    "determinism": _determinism,
    "range": _range,
    "monotone": _monotone,
    "fails_closed": _fails_closed,
    "idempotent_output": _idempotent_output,
    "idempotent_stateful": _idempotent_stateful,
}


# ── Operational ──────────────────────────────────────────────────────


def _effect_violations(
    clause_id: str, trace: EffectTrace, offending: Callable[[Any], bool], what: str
) -> ClauseOutcome:
    count = 0
    first_seq = None
    first_target = ""
    for record in trace.invocations:
        for effect in record.effects:
            if offending(effect):
                count += 1
                if first_seq is None:
                    first_seq, first_target = record.seq, f"{effect.kind} {effect.target}"
    if not count:
        return _ok(clause_id)
    return ClauseOutcome(
        clause_id=clause_id,
        passed=False,
        observed_value=count,
        allowed_value=0,
        detail=f"{count} {what}; first: {first_target}",
        observation_seq=first_seq,
    )


def _network(manifest: CapabilityManifest) -> Predicate:
    allowed = set(manifest.network_allowlist)

    def offending(effect) -> bool:
        return effect.kind == "network_call" and manifest.deny_other_outbound and effect.target not in allowed

    return lambda trace: _effect_violations("network_outbound", trace, offending, "unlisted outbound call(s)")


def _filesystem(manifest: CapabilityManifest) -> Predicate:
    def offending(effect) -> bool:
        if effect.kind == "fs_write":
            return not within_prefixes(effect.target, manifest.fs_write)
        if effect.kind == "fs_read":
            return not within_prefixes(effect.target, manifest.fs_read + manifest.fs_write)
        return False

    return lambda trace: _effect_violations("filesystem", trace, offending, "filesystem access(es) outside granted paths")


def _dependencies(manifest: CapabilityManifest) -> Predicate:
    allowed = set(manifest.dependency_allowlist)
    return lambda trace: _effect_violations(
        "dependencies",
        trace,
        lambda e: e.kind == "dependency_use" and e.target not in allowed,
        "unapproved dependency use(s)",
    )


def _secrets(manifest: CapabilityManifest) -> Predicate:
    allowed = set(manifest.secrets_allowlist)
    return lambda trace: _effect_violations(
        "secrets",
        trace,
        lambda e: e.kind == "secret_access" and e.target not in allowed,
        "unlisted secret access(es)",
    )


def _background(manifest: CapabilityManifest) -> Predicate:
    if manifest.background_work_allowed:
        return lambda trace: _ok("background_work")
    return lambda trace: _effect_violations(
        "background_work",
        trace,
        lambda e: e.post_response or e.kind == "background_task",
        "effect(s) after the response",
    )


def _latency(manifest: CapabilityManifest) -> Predicate:
    budget = manifest.max_latency_ms_p95

    def check(trace: EffectTrace) -> ClauseOutcome:
        observed = p95([r.latency_ms for r in trace.invocations])
        if observed <= budget:
            return _ok("max_latency_ms_p95")
        slow = next((r.seq for r in trace.invocations if r.latency_ms > budget), None)
        return ClauseOutcome(
            clause_id="max_latency_ms_p95",
            passed=False,
            observed_value=observed,
            allowed_value=budget,
            detail=f"p95 latency {observed} ms exceeds {budget} ms",
            observation_seq=slow,
        )

    return check


def _memory(manifest: CapabilityManifest) -> Predicate:
    budget = manifest.max_memory_mb

    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            if record.peak_memory_mb > budget:
                return ClauseOutcome(
                    clause_id="max_memory_mb",
                    passed=False,
                    observed_value=max(r.peak_memory_mb for r in trace.invocations),
                    allowed_value=budget,
                    observation_seq=record.seq,
                )
        return _ok("max_memory_mb")

    return check


def _budget(stem: str, limit: int) -> Predicate:
    clause_id = budget_clause_id(stem)

    def check(trace: EffectTrace) -> ClauseOutcome:
        for record in trace.invocations:
            count = sum(1 for e in record.effects if matches_stem(e.target, stem))
            if count > limit:
                return ClauseOutcome(
                    clause_id=clause_id,
                    passed=False,
                    observed_value=count,
                    allowed_value=limit,
                    detail=f"{count} calls to {stem} in one request",
                    observation_seq=record.seq,
                )
        return _ok(clause_id)

    return check


# ── Assembly ─────────────────────────────────────────────────────────


def invariant_document(sealed: SealedBundle, key: str) -> Document:
    manifest = sealed.bundle.documents[0].content
    rel = manifest["invariants"][key]
    return next(d.content for d in sealed.bundle.documents if d.path == rel)


def _operational_declarations(raw: Document) -> dict[str, Document]:
    caps = raw.get("capabilities", {}) or {}
    resources = caps.get("resources", {}) or {}
    declarations = {
        "network_outbound": {"network": caps.get("network", {})},
        "filesystem": {"filesystem": caps.get("filesystem", {})},
        "dependencies": {"dependencies": caps.get("dependencies", {})},
        "secrets": {"secrets": caps.get("secrets", {})},
        "background_work": {"background_work": caps.get("background_work", {"allowed": False})},
    }
    for key, value in resources.items():
        declarations[key] = {key: value}
    return declarations


def compile_guarantees(sealed: SealedBundle) -> GuaranteeSurface:
    bundle = sealed.bundle
    schema = bundle.structural
    structural_raw = invariant_document(sealed, "structural")
    behavioral_raw = invariant_document(sealed, "behavioral").get("properties", []) or []
    operational_raw = _operational_declarations(invariant_document(sealed, "operational"))

    clauses: list[CompiledClause] = [
        CompiledClause(
            clause_id=clause_id,
            group=STRUCTURAL,
            category=STRUCTURAL_DRIFT,
            declaration={clause_id: structural_raw.get(clause_id, [])},
            monitorable=True,
            predicate=builder(schema),
        )
        for clause_id, builder in zip(
            STRUCTURAL_CLAUSE_IDS, (_request_clause, _response_clause, _errors_clause)
        )
    ]

    for prop, raw in zip(bundle.behavioral, behavioral_raw):
        builder = _BEHAVIORAL_BUILDERS.get(prop.kind)
        if builder is None:
            raise UnsupportedPropertyKind(f"Property '{prop.name}' has unsupported kind '{prop.kind}'")
        clauses.append(
            CompiledClause(
                clause_id=prop.name,
                group=BEHAVIORAL,
                category=BEHAVIORAL_DRIFT,
                declaration=raw,
                monitorable=prop.kind in MONITORABLE_KINDS,
                predicate=builder(prop, schema),
            )
        )

    manifest = bundle.operational
    builders: dict[str, tuple[str, Predicate]] = {
        "network_outbound": (AUTHORITY_VIOLATION, _network(manifest)),
        "filesystem": (AUTHORITY_VIOLATION, _filesystem(manifest)),
        "dependencies": (AUTHORITY_VIOLATION, _dependencies(manifest)),
        "secrets": (AUTHORITY_VIOLATION, _secrets(manifest)),
        "background_work": (AUTHORITY_VIOLATION, _background(manifest)),
    }
    if manifest.max_latency_ms_p95 is not None:
        builders["max_latency_ms_p95"] = (OPERATIONAL_DEGRADATION, _latency(manifest))
    if manifest.max_memory_mb is not None:
        builders["max_memory_mb"] = (OPERATIONAL_DEGRADATION, _memory(manifest))
    for stem, limit in manifest.per_request_call_budgets.items():
        builders[budget_clause_id(stem)] = (OPERATIONAL_DEGRADATION, _budget(stem, limit))

    for clause_id in operational_clause_ids(manifest):
        category, predicate = builders[clause_id]
        clauses.append(
            CompiledClause(
                clause_id=clause_id,
                group=OPERATIONAL,
                category=category,
                declaration=operational_raw.get(clause_id, {}),
                monitorable=True,
                predicate=predicate,
            )
        )

    logger.debug("Compiled %d clauses for %s@%s", len(clauses), sealed.protocol_id, sealed.version)
    return GuaranteeSurface(
        protocol_id=sealed.protocol_id,
        version=sealed.version,
        bundle_digest=sealed.bundle_digest,
        clauses=tuple(clauses),
    )
