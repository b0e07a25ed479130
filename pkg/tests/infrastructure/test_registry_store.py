import json
import os
from pathlib import Path

import pytest

from pdd.domain.errors import DigestMismatch, NotFound, RegistryUnavailable, VersionConflict, WriteFailure
from pdd.infrastructure.bundle_reader import parse_bundle
from pdd.infrastructure.canonical import sha256_digest
from pdd.infrastructure.registry_store import FileRegistry
from pdd.infrastructure.seal_engine import seal_bundle
from tests.conftest import T0, edit_yaml


@pytest.fixture
def registry(tmp_path, clock):
    return FileRegistry(tmp_path / "registry", clock)


class TestPublish:
    def test_publish_and_get(self, registry, fraud_sealed):
        record = registry.publish(fraud_sealed, "risk-platform")
        assert record.created
        assert (record.publisher, record.published_at) == ("risk-platform", T0)
        fetched = registry.get("fraud-score", "1.0.0")
        assert fetched.bundle_digest == fraud_sealed.bundle_digest
        assert registry.get_by_digest(fraud_sealed.bundle_digest).bundle.documents == fraud_sealed.bundle.documents

    def test_republishing_identical_content_is_a_no_op(self, registry, fraud_sealed, clock):
        registry.publish(fraud_sealed, "risk-platform")
        clock.advance(3600)
        again = registry.publish(fraud_sealed, "someone-else")
        assert not again.created
        assert (again.publisher, again.published_at) == ("risk-platform", T0)

    def test_same_version_other_content_conflicts(self, registry, fraud_sealed, fraud_bundle, clock):
        registry.publish(fraud_sealed, "risk-platform")
        edit_yaml(
            fraud_bundle / "operational/capabilities.yaml",
            lambda d: d["capabilities"]["resources"].update(max_latency_ms_p95=60),
        )
        with pytest.raises(VersionConflict):
            registry.publish(seal_bundle(parse_bundle(fraud_bundle), clock), "risk-platform")
        assert registry.get("fraud-score", "1.0.0").bundle_digest == fraud_sealed.bundle_digest

    def test_versions_and_list_are_semver_ordered(self, registry, fraud_bundle, clock):
        for version in ("1.10.0", "1.2.0", "1.9.1"):
            edit_yaml(fraud_bundle / "protocol.yaml", lambda d, v=version: d.update(version=v))
            registry.publish(seal_bundle(parse_bundle(fraud_bundle), clock), "risk-platform")
        assert registry.versions("fraud-score") == ["1.2.0", "1.9.1", "1.10.0"]
        assert [e.version for e in registry.list()] == ["1.2.0", "1.9.1", "1.10.0"]
        assert registry.versions("chargeback-score") == []


class TestLookupFailures:
    def test_unpublished(self, registry):
        with pytest.raises(NotFound):
            registry.get("fraud-score", "1.0.0")

    @pytest.mark.parametrize("digest", ["sha256:" + "0" * 64, "not-a-digest"])
    def test_unknown_digest(self, registry, digest):
        with pytest.raises(NotFound):
            registry.get_by_digest(digest)

    def test_tampered_content(self, registry, fraud_sealed):
        record = registry.publish(fraud_sealed, "risk-platform")
        content = Path(record.path) / "content.json"
        doc = json.loads(content.read_text())
        doc["content"]["manifest"]["component"] = "risk.scoring.Patched"
        content.write_text(json.dumps(doc))
        with pytest.raises(DigestMismatch):
            registry.get("fraud-score", "1.0.0")

    def test_unreadable_index(self, registry, fraud_sealed):
        registry.publish(fraud_sealed, "risk-platform")
        (registry.root / "index.json").write_text("{not json")
        with pytest.raises(RegistryUnavailable):
            registry.versions("fraud-score")


class TestEvidenceStore:
    def test_content_addressed(self, registry, admitted_evidence):
        first = registry.store_evidence(admitted_evidence)
        second = registry.store_evidence(admitted_evidence)
        assert first == second
        assert Path(first.path).name == first.digest.removeprefix("sha256:") + ".json"
        assert sha256_digest(Path(first.path).read_bytes()) == first.digest

    def test_load_round_trip(self, registry, admitted_evidence):
        receipt = registry.store_evidence(admitted_evidence)
        assert registry.load_evidence(receipt.digest)["evidence_id"] == admitted_evidence.evidence_id

    def test_load_detects_tampering(self, registry, admitted_evidence):
        receipt = registry.store_evidence(admitted_evidence)
        Path(receipt.path).write_bytes(Path(receipt.path).read_bytes().replace(b"admit", b"reject"))
        with pytest.raises(DigestMismatch):
            registry.load_evidence(receipt.digest)

    def test_load_unknown(self, registry):
        with pytest.raises(NotFound):
            registry.load_evidence("sha256:" + "a" * 64)


class TestInterruptedPublish:
    @pytest.mark.parametrize("failing_file", ["content.json", "publication.json", "index.json"])
    def test_failed_publish_leaves_registry_unchanged(
        self, registry, fraud_sealed, fraud_bundle, clock, monkeypatch, failing_file
    ):
        registry.publish(fraud_sealed, "risk-platform")
        edit_yaml(fraud_bundle / "protocol.yaml", lambda d: d.update(version="1.1.0"))
        newer = seal_bundle(parse_bundle(fraud_bundle), clock)
        index_before = (registry.root / "index.json").read_bytes()
        real_replace = os.replace

        def crash_on(src, dst):
            if Path(dst).name == failing_file:
                raise OSError("disk full")
            real_replace(src, dst)

        monkeypatch.setattr(os, "replace", crash_on)
        with pytest.raises(WriteFailure):
            registry.publish(newer, "risk-platform")
        monkeypatch.undo()

        assert (registry.root / "index.json").read_bytes() == index_before
        assert registry.versions("fraud-score") == ["1.0.0"]
        assert [e.bundle_digest for e in registry.list()] == [fraud_sealed.bundle_digest]
        with pytest.raises(NotFound):
            registry.get("fraud-score", "1.1.0")
        with pytest.raises(NotFound):
            registry.get_by_digest(newer.bundle_digest)
        assert not (registry.root / "bundles" / newer.bundle_digest.removeprefix("sha256:")).exists()
        assert not list(registry.root.rglob("*.tmp"))
        assert registry.publish(newer, "risk-platform").created
