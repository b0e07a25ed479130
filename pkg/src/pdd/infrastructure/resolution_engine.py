"""Dependency resolution and capability reconciliation against a bundle registry.

Resolution is a fixpoint: ranges are collected from the root and from every
currently pinned bundle, each protocol is pinned to the highest registry
version inside the intersection of its ranges, and the loop repeats until
the pin set stops changing.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping

from pdd.domain.errors import RegistryUnavailable
from pdd.domain.models import (
    ConflictRecord,
    Pin,
    ProtocolBundle,
    ResolutionResult,
    SealedBundle,
    SemVer,
    VersionRange,
)
from pdd.domain.ports import BundleRegistry

logger = logging.getLogger(__name__)

VERSION_CONFLICT = "version_conflict"
UNRESOLVABLE = "unresolvable"
CAPABILITY_CONFLICT = "capability_conflict"


def _collect_ranges(
    root: ProtocolBundle, pinned_bundles: Mapping[str, SealedBundle]
) -> dict[str, list[VersionRange]]:
    ranges: dict[str, list[VersionRange]] = {}
    sources = [root] + [pinned_bundles[pid].bundle for pid in sorted(pinned_bundles)]
    for bundle in sources:
        for dep in bundle.dependencies:
            if dep.protocol_id == root.protocol_id:
                continue
            bucket = ranges.setdefault(dep.protocol_id, [])
            if dep.version_range not in bucket:
                bucket.append(dep.version_range)
    return ranges


def _registry_versions(registry: BundleRegistry, protocol_id: str) -> list[SemVer]:
    try:
        return sorted(SemVer.parse(v) for v in registry.versions(protocol_id))
    except RegistryUnavailable:
        raise
    except OSError as exc:
        raise RegistryUnavailable(str(exc)) from exc


def _pin_one(
    protocol_id: str, ranges: list[VersionRange], registry: BundleRegistry
) -> tuple[SemVer | None, ConflictRecord | None]:
    rendered = tuple(str(r) for r in ranges)
    intersection: VersionRange | None = ranges[0]
    for r in ranges[1:]:
        intersection = intersection.intersect(r) if intersection else None
    if intersection is None:
        return None, ConflictRecord(protocol_id, VERSION_CONFLICT, ranges=rendered, detail="ranges do not intersect")

    available = _registry_versions(registry, protocol_id)
    if not available:
        return None, ConflictRecord(protocol_id, UNRESOLVABLE, ranges=rendered, detail="protocol not in registry")
    satisfying = [v for v in available if all(r.contains(v) for r in ranges)]
    if not satisfying:
        return None, ConflictRecord(
            protocol_id,
            UNRESOLVABLE,
            ranges=rendered,
            available_versions=tuple(str(v) for v in available),
            detail="no registry version satisfies every range",
        )
    return satisfying[-1], None


def resolve_dependencies(root: ProtocolBundle, registry: BundleRegistry) -> ResolutionResult:
    pinned_bundles: dict[str, SealedBundle] = {}
    conflicts: dict[str, ConflictRecord] = {}
    # Each round can only pin protocols reachable from the previous one.
    for _ in range(64):
        ranges = _collect_ranges(root, pinned_bundles)
        next_bundles: dict[str, SealedBundle] = {}
        next_conflicts: dict[str, ConflictRecord] = {}
        for protocol_id in sorted(ranges):
            version, conflict = _pin_one(protocol_id, ranges[protocol_id], registry)
            if conflict is not None:
                next_conflicts[protocol_id] = conflict
                continue
            current = pinned_bundles.get(protocol_id)
            if current is not None and current.version == str(version):
                next_bundles[protocol_id] = current
            else:
                next_bundles[protocol_id] = registry.get(protocol_id, str(version))
        stable = {p: b.bundle_digest for p, b in next_bundles.items()} == {
            p: b.bundle_digest for p, b in pinned_bundles.items()
        } and next_conflicts.keys() == conflicts.keys()
        pinned_bundles, conflicts = next_bundles, next_conflicts
        if stable:
            break

    for conflict in conflicts.values():
        logger.warning("Dependency %s: %s (%s)", conflict.protocol_id, conflict.kind, ", ".join(conflict.ranges))
    return ResolutionResult(
        pinned={p: Pin(b.version, b.bundle_digest) for p, b in sorted(pinned_bundles.items())},
        conflicts=tuple(conflicts[p] for p in sorted(conflicts)),
    )


def reconcile_capabilities(
    root: ProtocolBundle, pinned_bundles: Mapping[str, SealedBundle]
) -> list[ConflictRecord]:
    """Flag dependencies that need outbound destinations the root denies."""
    manifest = root.operational
    if not manifest.deny_other_outbound:
        return []
    allowed = set(manifest.network_allowlist)
    conflicts = []
    for protocol_id in sorted(pinned_bundles):
        extra = [d for d in pinned_bundles[protocol_id].bundle.operational.network_allowlist if d not in allowed]
        if extra:
            conflicts.append(
                ConflictRecord(
                    protocol_id,
                    CAPABILITY_CONFLICT,
                    destinations=tuple(extra),
                    detail=f"{root.protocol_id} denies outbound traffic to {', '.join(extra)}",
                )
            )
    return conflicts
