"""Conservative, per-clause refinement check between two versions of one protocol."""
from __future__ import annotations

import logging

from pdd.domain.errors import ProtocolMismatch
from pdd.domain.models import (
    BEHAVIORAL,
    OPERATIONAL,
    STRUCTURAL,
    BehavioralProperty,
    CapabilityManifest,
    ClauseComparison,
    RefinementReport,
    SchemaNode,
    SealedBundle,
)
from pdd.infrastructure.guarantee_compiler import (
    budget_clause_id,
    operational_clause_ids,
    within_prefixes,
)

logger = logging.getLogger(__name__)

PRESERVED = "preserved"
STRENGTHENED = "strengthened"
ADDED = "added"
WEAKENED = "weakened"
MISSING = "missing"
INCOMPARABLE = "incomparable"


class _Tally:
    """Collects weakenings and strengthenings while walking two declarations."""

    def __init__(self) -> None:
        self.weaker: list[str] = []
        self.stronger: list[str] = []

    def status(self) -> str:
        if self.weaker:
            return WEAKENED
        return STRENGTHENED if self.stronger else PRESERVED

    def detail(self) -> str:
        return "; ".join(self.weaker or self.stronger)


# ── Structural ───────────────────────────────────────────────────────


def _compare_bound(tally: _Tally, path: str, new, old, lower: bool) -> None:
    name = "minimum" if lower else "maximum"
    if old is None:
        if new is not None:
            tally.stronger.append(f"{path}: {name} {new} added")
        return
    if new is None:
        tally.weaker.append(f"{path}: {name} {old} dropped")
    elif (new < old) if lower else (new > old):
        tally.weaker.append(f"{path}: {name} {old} -> {new}")
    elif new != old:
        tally.stronger.append(f"{path}: {name} {old} -> {new}")


def _compare_node(tally: _Tally, path: str, new: SchemaNode, old: SchemaNode) -> None:
    if new.kind != old.kind:
        if old.kind == "number" and new.kind == "integer":
            tally.stronger.append(f"{path or '/'}: number narrowed to integer")
        else:
            tally.weaker.append(f"{path or '/'}: kind {old.kind} -> {new.kind}")
            return

    if old.kind == "object":
        dropped = set(old.required) - set(new.required)
        if dropped:
            tally.weaker.append(f"{path or '/'}: no longer requires {sorted(dropped)}")
        added = set(new.required) - set(old.required)
        if added:
            tally.stronger.append(f"{path or '/'}: now requires {sorted(added)}")
        for name, child in old.properties.items():
            if name not in new.properties:
                tally.weaker.append(f"{path}/{name}: constraint removed")
            else:
                _compare_node(tally, f"{path}/{name}", new.properties[name], child)
        for name in new.properties.keys() - old.properties.keys():
            tally.stronger.append(f"{path}/{name}: constraint added")
    elif old.kind == "enum":
        extra = [v for v in new.enum_values if v not in old.enum_values]
        if extra:
            tally.weaker.append(f"{path}: enum widened by {extra}")
        elif len(new.enum_values) < len(old.enum_values):
            tally.stronger.append(f"{path}: enum narrowed")
    elif old.kind == "string":
        if old.pattern is not None and new.pattern != old.pattern:
            tally.weaker.append(f"{path}: pattern changed")
        elif old.pattern is None and new.pattern is not None:
            tally.stronger.append(f"{path}: pattern added")
    else:
        _compare_bound(tally, path, new.minimum, old.minimum, lower=True)
        _compare_bound(tally, path, new.maximum, old.maximum, lower=False)


def _structural(new: SealedBundle, old: SealedBundle) -> list[ClauseComparison]:
    result = []
    for clause_id in ("request", "response"):
        tally = _Tally()
        _compare_node(
            tally, f"/{clause_id}", getattr(new.bundle.structural, clause_id), getattr(old.bundle.structural, clause_id)
        )
        result.append(ClauseComparison(clause_id, STRUCTURAL, tally.status(), tally.detail()))

    tally = _Tally()
    new_errors, old_errors = set(new.bundle.structural.errors), set(old.bundle.structural.errors)
    if new_errors - old_errors:
        tally.weaker.append(f"error kinds added: {sorted(new_errors - old_errors)}")
    elif old_errors - new_errors:
        tally.stronger.append(f"error kinds removed: {sorted(old_errors - new_errors)}")
    result.append(ClauseComparison("errors", STRUCTURAL, tally.status(), tally.detail()))
    return result


# ── Behavioral ───────────────────────────────────────────────────────


def _compare_property(new: BehavioralProperty, old: BehavioralProperty) -> ClauseComparison:
    if new.kind != old.kind or new.quantifier != old.quantifier:
        return ClauseComparison(old.name, BEHAVIORAL, INCOMPARABLE, f"kind {old.kind} -> {new.kind}")
    for attribute in ("target_field", "varied_field", "direction", "error_kind"):
        if getattr(new, attribute) != getattr(old, attribute):
            return ClauseComparison(
                old.name, BEHAVIORAL, INCOMPARABLE, f"{attribute} {getattr(old, attribute)} -> {getattr(new, attribute)}"
            )
    tally = _Tally()
    if new.case_count < old.case_count:
        tally.weaker.append(f"cases {old.case_count} -> {new.case_count}")
    elif new.case_count > old.case_count:
        tally.stronger.append(f"cases {old.case_count} -> {new.case_count}")
    if old.kind == "range":
        (new_lo, new_hi), (old_lo, old_hi) = new.bounds, old.bounds
        _compare_bound(tally, old.name, new_lo, old_lo, lower=True)
        _compare_bound(tally, old.name, new_hi, old_hi, lower=False)
    return ClauseComparison(old.name, BEHAVIORAL, tally.status(), tally.detail())


def _behavioral(new: SealedBundle, old: SealedBundle) -> list[ClauseComparison]:
    new_props = {p.name: p for p in new.bundle.behavioral}
    old_names = {p.name for p in old.bundle.behavioral}
    result = []
    for prop in old.bundle.behavioral:
        if prop.name not in new_props:
            result.append(ClauseComparison(prop.name, BEHAVIORAL, MISSING, "property removed"))
        else:
            result.append(_compare_property(new_props[prop.name], prop))
    result.extend(
        ClauseComparison(p.name, BEHAVIORAL, ADDED, "new property")
        for p in new.bundle.behavioral
        if p.name not in old_names
    )
    return result


# ── Operational ──────────────────────────────────────────────────────


def _subset(tally: _Tally, label: str, new: tuple[str, ...], old: tuple[str, ...]) -> None:
    extra = sorted(set(new) - set(old))
    if extra:
        tally.weaker.append(f"{label} grants {extra}")
    elif set(old) - set(new):
        tally.stronger.append(f"{label} revokes {sorted(set(old) - set(new))}")


def _prefixes(tally: _Tally, label: str, new: tuple[str, ...], old: tuple[str, ...]) -> None:
    wider = [p for p in new if not within_prefixes(p, old)]
    if wider:
        tally.weaker.append(f"{label} grants {wider}")
    elif set(new) != set(old):
        tally.stronger.append(f"{label} narrowed")


def _budget(tally: _Tally, label: str, new, old) -> None:
    if old is None:
        if new is not None:
            tally.stronger.append(f"{label} {new} added")
    elif new is None:
        tally.weaker.append(f"{label} {old} dropped")
    elif new > old:
        tally.weaker.append(f"{label} {old} -> {new}")
    elif new < old:
        tally.stronger.append(f"{label} {old} -> {new}")


def _operational_clause(clause_id: str, new: CapabilityManifest, old: CapabilityManifest) -> _Tally:
    tally = _Tally()
    if clause_id == "network_outbound":
        if old.deny_other_outbound:
            if not new.deny_other_outbound:
                tally.weaker.append("deny_other_outbound turned off")
            else:
                _subset(tally, "outbound_allowlist", new.network_allowlist, old.network_allowlist)
        elif new.deny_other_outbound:
            tally.stronger.append("deny_other_outbound turned on")
    elif clause_id == "filesystem":
        _prefixes(tally, "write", new.fs_write, old.fs_write)
        _prefixes(tally, "read", new.fs_read + new.fs_write, old.fs_read + old.fs_write)
    elif clause_id == "dependencies":
        _subset(tally, "dependencies", new.dependency_allowlist, old.dependency_allowlist)
    elif clause_id == "secrets":
        _subset(tally, "secrets", new.secrets_allowlist, old.secrets_allowlist)
    elif clause_id == "background_work":
        if new.background_work_allowed and not old.background_work_allowed:
            tally.weaker.append("background work now allowed")
        elif old.background_work_allowed and not new.background_work_allowed:
            tally.stronger.append("background work now forbidden")
    elif clause_id == "max_latency_ms_p95":
        _budget(tally, clause_id, new.max_latency_ms_p95, old.max_latency_ms_p95)
    elif clause_id == "max_memory_mb":
        _budget(tally, clause_id, new.max_memory_mb, old.max_memory_mb)
    else:
        stem = next(s for s in old.per_request_call_budgets if budget_clause_id(s) == clause_id)
        _budget(tally, clause_id, new.per_request_call_budgets.get(stem), old.per_request_call_budgets[stem])
    return tally


def _operational(new: SealedBundle, old: SealedBundle) -> list[ClauseComparison]:
    new_manifest, old_manifest = new.bundle.operational, old.bundle.operational
    old_ids = operational_clause_ids(old_manifest)
    result = []
    for clause_id in old_ids:
        tally = _operational_clause(clause_id, new_manifest, old_manifest)
        result.append(ClauseComparison(clause_id, OPERATIONAL, tally.status(), tally.detail()))
    result.extend(
        ClauseComparison(clause_id, OPERATIONAL, ADDED, "new bound")
        for clause_id in operational_clause_ids(new_manifest)
        if clause_id not in old_ids
    )
    return result


def check_refinement(p_prime: SealedBundle, p: SealedBundle) -> RefinementReport:
    """Report whether *p_prime* keeps every constraint of *p*, possibly tightened."""
    if p_prime.protocol_id != p.protocol_id:
        raise ProtocolMismatch(f"Cannot compare '{p_prime.protocol_id}' with '{p.protocol_id}'")
    comparisons = _structural(p_prime, p) + _behavioral(p_prime, p) + _operational(p_prime, p)
    refines = all(c.acceptable for c in comparisons)
    logger.info(
        "Refinement %s@%s over %s: %s",
        p.protocol_id,
        p_prime.version,
        p.version,
        "refines" if refines else "does not refine",
    )
    return RefinementReport(
        protocol_id=p.protocol_id,
        refined_version=p_prime.version,
        base_version=p.version,
        refines=refines,
        comparisons=tuple(comparisons),
    )
