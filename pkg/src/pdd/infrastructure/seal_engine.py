from __future__ import annotations

import logging

from pdd.domain.errors import DigestMismatch
from pdd.domain.models import Document, ProtocolBundle, SealedBundle
from pdd.domain.ports import Clock
from pdd.infrastructure.bundle_reader import bundle_from_documents
from pdd.infrastructure.canonical import document_digest, parse_utc
from pdd.infrastructure.documents import bundle_content_document, documents_from_content

logger = logging.getLogger(__name__)


def content_digest(bundle: ProtocolBundle) -> str:
    return document_digest(bundle_content_document(bundle.documents))


def seal_bundle(bundle: ProtocolBundle, clock: Clock) -> SealedBundle:
    """Seal *bundle*; the digest depends on content only, never on the sealing time."""
    digest = content_digest(bundle)
    logger.info("Sealed %s@%s as %s", bundle.protocol_id, bundle.version, digest)
    return SealedBundle(bundle=bundle, bundle_digest=digest, sealed_at=clock.now())


def sealed_from_document(doc: Document) -> SealedBundle:
    """Rebuild a sealed bundle from its stored form, re-verifying the digest."""
    digest = document_digest(doc["content"])
    if digest != doc["bundle_digest"]:
        raise DigestMismatch(
            f"{doc.get('protocol_id')}@{doc.get('version')}: stored digest {doc['bundle_digest']} "
            f"but content hashes to {digest}"
        )
    bundle = bundle_from_documents(documents_from_content(doc["content"]))
    return SealedBundle(bundle=bundle, bundle_digest=digest, sealed_at=parse_utc(doc["sealed_at"]))
