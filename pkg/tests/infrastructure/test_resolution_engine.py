from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from pdd.domain.models import DependencyDecl, SemVer, VersionRange
from pdd.infrastructure.bundle_reader import parse_bundle
from pdd.infrastructure.clock import FixedClock
from pdd.infrastructure.resolution_engine import reconcile_capabilities, resolve_dependencies
from pdd.infrastructure.seal_engine import seal_bundle
from tests.application.fakes import FakeRegistry
from tests.conftest import BUNDLES, T0, write_bundle

TEMPLATE = seal_bundle(parse_bundle(BUNDLES / "record-normalizer.protocol"), FixedClock(T0))


def variant(protocol_id, version, dependencies=()):
    """An in-memory sealed bundle with its own identity and dependency list."""
    bundle = replace(
        TEMPLATE.bundle,
        protocol_id=protocol_id,
        version=version,
        dependencies=tuple(DependencyDecl(p, VersionRange.parse(r)) for p, r in dependencies),
    )
    return replace(TEMPLATE, bundle=bundle, bundle_digest=f"sha256:{protocol_id}-{version}")


@pytest.fixture
def seal_into(tmp_path, clock):
    def seal(registry, *args, **kwargs):
        sealed = seal_bundle(parse_bundle(write_bundle(tmp_path, *args, **kwargs)), clock)
        registry.add(sealed)
        return sealed

    return seal


class TestResolve:
    def test_highest_version_in_range(self, seal_into):
        registry = FakeRegistry()
        for version in ("1.0.0", "1.2.0", "2.0.0"):
            seal_into(registry, "feature-store", version)
        root = seal_into(registry, "fraud-score", "1.0.0", dependencies=(("feature-store", ">=1.0.0 <2.0.0"),))
        result = resolve_dependencies(root.bundle, registry)
        assert result.conflicts == ()
        assert result.pinned["feature-store"].version == "1.2.0"
        assert result.pinned["feature-store"].bundle_digest == registry.get("feature-store", "1.2.0").bundle_digest

    def test_transitive_dependencies_are_pinned(self):
        registry = FakeRegistry([
            variant("feature-store", "1.4.0", [("identity", ">=3.0.0 <4.0.0")]),
            variant("identity", "3.1.0"),
            variant("identity", "4.0.0"),
        ])
        root = variant("fraud-score", "1.0.0", [("feature-store", ">=1.0.0 <2.0.0")])
        result = resolve_dependencies(root.bundle, registry)
        assert {p: pin.version for p, pin in result.pinned.items()} == {"feature-store": "1.4.0", "identity": "3.1.0"}

    def test_disjoint_ranges_conflict(self):
        registry = FakeRegistry([
            variant("feature-store", "1.4.0", [("identity", ">=3.0.0 <4.0.0")]),
            variant("identity", "3.1.0"),
            variant("identity", "4.2.0"),
        ])
        root = variant(
            "fraud-score", "1.0.0", [("feature-store", ">=1.0.0 <2.0.0"), ("identity", ">=4.0.0 <5.0.0")]
        )
        (conflict,) = resolve_dependencies(root.bundle, registry).conflicts
        assert (conflict.protocol_id, conflict.kind) == ("identity", "version_conflict")
        assert set(conflict.ranges) == {">=4.0.0 <5.0.0", ">=3.0.0 <4.0.0"}

    def test_unknown_protocol(self):
        root = variant("fraud-score", "1.0.0", [("ledger", ">=1.0.0 <2.0.0")])
        (conflict,) = resolve_dependencies(root.bundle, FakeRegistry()).conflicts
        assert conflict.kind == "unresolvable"
        assert conflict.detail == "protocol not in registry"

    def test_no_version_in_range(self):
        registry = FakeRegistry([variant("ledger", "0.9.0"), variant("ledger", "2.0.0")])
        root = variant("fraud-score", "1.0.0", [("ledger", ">=1.0.0 <2.0.0")])
        (conflict,) = resolve_dependencies(root.bundle, registry).conflicts
        assert conflict.kind == "unresolvable"
        assert conflict.available_versions == ("0.9.0", "2.0.0")

    def test_self_dependency_is_ignored(self):
        root = variant("fraud-score", "1.0.0", [("fraud-score", ">=0.1.0 <1.0.0")])
        result = resolve_dependencies(root.bundle, FakeRegistry())
        assert (result.pinned, result.conflicts) == ({}, ())


class TestReconcile:
    def test_dependency_destination_outside_root_allowlist(self, seal_into):
        registry = FakeRegistry()
        dep = seal_into(registry, "feature-store", "1.0.0", allowlist=("feature-db.internal:5432",))
        root = seal_into(registry, "fraud-score", "1.0.0", allowlist=("feature-store.internal:443",))
        (conflict,) = reconcile_capabilities(root.bundle, {"feature-store": dep})
        assert conflict.kind == "capability_conflict"
        assert conflict.destinations == ("feature-db.internal:5432",)

    def test_compatible_allowlists(self, seal_into):
        registry = FakeRegistry()
        dep = seal_into(registry, "feature-store", "1.0.0", allowlist=("feature-store.internal:443",))
        root = seal_into(registry, "fraud-score", "1.0.0", allowlist=("feature-store.internal:443",))
        assert reconcile_capabilities(root.bundle, {"feature-store": dep}) == []


class TestPinningIsMaximal:
    @given(
        st.sets(st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=12),
        st.tuples(st.integers(0, 3), st.integers(0, 3)),
    )
    def test_pin_is_highest_satisfying_version(self, versions, bounds):
        low, high = sorted(bounds)
        if low == high:
            high += 1
        rendered = [f"{a}.{b}.{c}" for a, b, c in versions]
        registry = FakeRegistry([variant("dep", v) for v in rendered])
        version_range = f">={low}.0.0 <{high}.0.0"
        result = resolve_dependencies(variant("root", "1.0.0", [("dep", version_range)]).bundle, registry)
        inside = [SemVer(*v) for v in versions if low <= v[0] < high]
        if inside:
            assert result.pinned["dep"].version == str(max(inside))
        else:
            assert result.conflicts[0].kind == "unresolvable"
