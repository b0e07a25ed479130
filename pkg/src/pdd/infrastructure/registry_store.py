"""Filesystem protocol registry and content-addressed evidence store.

Layout under the registry root::

    index.json                      {"<protocol_id>@<version>": "sha256:..."}
    index.lock                      advisory lock guarding index mutations
    bundles/<hex>/content.json      sealed bundle document
    bundles/<hex>/publication.json  publisher and publish time
    evidence/<hex>.json             evidence, rejections, repair contexts
"""
from __future__ import annotations

import json
import logging
import shutil
from contextlib import AbstractContextManager
from datetime import datetime
from pathlib import Path
from typing import Any

from pdd.domain.errors import (
    DigestMismatch,
    NotFound,
    RegistryUnavailable,
    VersionConflict,
)
from pdd.domain.models import (
    Document,
    PublicationRecord,
    RegistryEntry,
    SealedBundle,
    SemVer,
    StorageReceipt,
)
from pdd.domain.ports import Clock
from pdd.infrastructure.canonical import (
    canonical_bytes,
    digest_hex,
    format_utc,
    is_digest,
    parse_utc,
    sha256_digest,
)
from pdd.infrastructure.clock import SystemClock
from pdd.infrastructure.documents import sealed_to_document, to_document
from pdd.infrastructure.seal_engine import sealed_from_document
from pdd.infrastructure.storage import atomic_write, exclusive_lock, write_canonical

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
LOCK_NAME = "index.lock"


def _index_key(protocol_id: str, version: str) -> str:
    return f"{protocol_id}@{version}"


class FileRegistry:
    """Implements the ``BundleRegistry`` port on a local directory."""

    def __init__(self, root: str | Path, clock: Clock | None = None) -> None:
        self._root = Path(root)
        self._clock = clock or SystemClock()

    @property
    def root(self) -> Path:
        return self._root

    @property
    def evidence_dir(self) -> Path:
        return self._root / "evidence"

    def _bundle_dir(self, digest: str) -> Path:
        return self._root / "bundles" / digest_hex(digest)

    # ── Index ────────────────────────────────────────────────────────

    def _locked(self) -> AbstractContextManager[None]:
        return exclusive_lock(self._root / LOCK_NAME)

    def _read_index(self) -> dict[str, str]:
        path = self._root / INDEX_NAME
        if not path.exists():
            return {}
        try:
            data = json.loads(path.read_bytes().decode("utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RegistryUnavailable(f"Cannot read registry index {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise RegistryUnavailable(f"Registry index {path} is not a mapping")
        return data

    # ── Bundles ──────────────────────────────────────────────────────

    def publish(self, sealed: SealedBundle, publisher: str) -> PublicationRecord:
        """Store *sealed* under its digest and map ``id@version`` to it.

        Publishing identical content again is a no-op returning ``created=False``.
        """
        key = _index_key(sealed.protocol_id, sealed.version)
        bundle_dir = self._bundle_dir(sealed.bundle_digest)
        with self._locked():
            index = self._read_index()
            existing = index.get(key)
            if existing is not None and existing != sealed.bundle_digest:
                raise VersionConflict(
                    f"{key} is already published as {existing}; refusing to rebind it to {sealed.bundle_digest}"
                )
            created = existing is None
            if created:
                fresh = not bundle_dir.exists()
                try:
                    write_canonical(bundle_dir / "content.json", sealed_to_document(sealed))
                    write_canonical(
                        bundle_dir / "publication.json",
                        {"publisher": publisher, "published_at": format_utc(self._clock.now())},
                    )
                    write_canonical(self._root / INDEX_NAME, {**index, key: sealed.bundle_digest})
                except BaseException:
                    # The index is replaced last, so it is still the old one here.
                    if fresh:
                        shutil.rmtree(bundle_dir, ignore_errors=True)
                    logger.error("Publishing %s failed; registry left unchanged", key)
                    raise
                logger.info("Published %s as %s", key, sealed.bundle_digest)
            else:
                logger.info("%s already published with identical digest", key)

        publication = self._read_json(bundle_dir / "publication.json")
        return PublicationRecord(
            protocol_id=sealed.protocol_id,
            version=sealed.version,
            bundle_digest=sealed.bundle_digest,
            path=str(bundle_dir),
            publisher=publication.get("publisher", publisher),
            published_at=_published_at(publication, self._clock),
            created=created,
        )

    def get(self, protocol_id: str, version: str) -> SealedBundle:
        key = _index_key(protocol_id, version)
        digest = self._read_index().get(key)
        if digest is None:
            raise NotFound(f"{key} is not published in {self._root}")
        sealed = self.get_by_digest(digest)
        if (sealed.protocol_id, sealed.version) != (protocol_id, version):
            raise DigestMismatch(f"{key} points at a bundle for {sealed.protocol_id}@{sealed.version}")
        return sealed

    def get_by_digest(self, bundle_digest: str) -> SealedBundle:
        if not is_digest(bundle_digest):
            raise NotFound(f"'{bundle_digest}' is not a sha256 digest")
        path = self._bundle_dir(bundle_digest) / "content.json"
        if not path.exists():
            raise NotFound(f"No bundle stored under {bundle_digest}")
        try:
            doc = json.loads(path.read_bytes().decode("utf-8"))
            sealed = sealed_from_document(doc)
        except DigestMismatch:
            raise
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DigestMismatch(f"Stored bundle {bundle_digest} is unreadable: {exc}") from exc
        if sealed.bundle_digest != bundle_digest:
            raise DigestMismatch(f"Bundle stored under {bundle_digest} hashes to {sealed.bundle_digest}")
        return sealed

    def versions(self, protocol_id: str) -> list[str]:
        prefix = f"{protocol_id}@"
        found = [key.removeprefix(prefix) for key in self._read_index() if key.startswith(prefix)]
        return sorted(found, key=SemVer.parse)

    def list(self) -> list[RegistryEntry]:
        entries = []
        for key, digest in self._read_index().items():
            protocol_id, _, version = key.rpartition("@")
            entries.append(RegistryEntry(protocol_id, version, digest))
        return sorted(entries, key=lambda e: (e.protocol_id, SemVer.parse(e.version)))

    # ── Evidence ─────────────────────────────────────────────────────

    def store_evidence(self, item: Any) -> StorageReceipt:
        """Store *item* content-addressed; identical content lands at the same path."""
        data = canonical_bytes(to_document(item))
        digest = sha256_digest(data)
        path = self.evidence_dir / f"{digest_hex(digest)}.json"
        if not path.exists():
            atomic_write(path, data)
        logger.debug("Stored %s at %s", type(item).__name__, path)
        return StorageReceipt(digest=digest, path=str(path))

    def load_evidence(self, digest: str) -> Document:
        path = self.evidence_dir / f"{digest_hex(digest)}.json"
        if not path.exists():
            raise NotFound(f"No evidence stored under {digest}")
        data = path.read_bytes()
        if sha256_digest(data) != digest:
            raise DigestMismatch(f"Evidence at {path} no longer hashes to {digest}")
        return json.loads(data.decode("utf-8"))

    @staticmethod
    def _read_json(path: Path) -> Document:
        try:
            return json.loads(path.read_bytes().decode("utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError):
            return {}


def _published_at(publication: Document, clock: Clock) -> datetime:
    stamp = publication.get("published_at")
    return parse_utc(stamp) if stamp else clock.now()
