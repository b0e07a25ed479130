"""Ed25519 detached signatures, key files and the issuer trust map."""
from __future__ import annotations

import base64
import json
import logging
import os
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from pdd.config import SIGNATURE_SCHEME
from pdd.domain.errors import SigningFailure
from pdd.infrastructure.storage import atomic_write

logger = logging.getLogger(__name__)

SIGNATURE_PREFIX = "sig:"


class Ed25519Signer:
    """Signs canonical payloads for one issuer; implements the ``Signer`` port."""

    scheme = SIGNATURE_SCHEME

    def __init__(self, private_key: Ed25519PrivateKey, issuer: str) -> None:
        self._key = private_key
        self.issuer = issuer

    @classmethod
    def from_pem(cls, path: str | Path, issuer: str) -> Ed25519Signer:
        try:
            key = serialization.load_pem_private_key(Path(path).read_bytes(), password=None)
        except (OSError, ValueError, TypeError) as exc:
            raise SigningFailure(f"Cannot load signing key {path}: {exc}") from exc
        if not isinstance(key, Ed25519PrivateKey):
            raise SigningFailure(f"{path} is not an Ed25519 private key")
        return cls(key, issuer)

    @classmethod
    def generate(cls, issuer: str) -> Ed25519Signer:
        return cls(Ed25519PrivateKey.generate(), issuer)

    def sign(self, payload: bytes) -> str:
        try:
            return SIGNATURE_PREFIX + base64.b64encode(self._key.sign(payload)).decode("ascii")
        except Exception as exc:
            raise SigningFailure(f"Signing failed for {self.issuer}: {exc}") from exc

    def public_key_b64(self) -> str:
        raw = self._key.public_key().public_bytes(
            encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
        )
        return base64.b64encode(raw).decode("ascii")

    def private_pem(self) -> bytes:
        return self._key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )


def verify_signature(public_key_b64: str, payload: bytes, signature: str) -> bool:
    if not signature.startswith(SIGNATURE_PREFIX):
        return False
    encoded = signature.removeprefix(SIGNATURE_PREFIX)
    try:
        key = Ed25519PublicKey.from_public_bytes(base64.b64decode(public_key_b64, validate=True))
        raw = base64.b64decode(encoded, validate=True)
        # Only the canonical encoding counts; padding bits must not vary.
        if base64.b64encode(raw).decode("ascii") != encoded:
            return False
        key.verify(raw, payload)
    except (InvalidSignature, ValueError):
        return False
    return True


def load_trust_map(path: str | Path | None) -> dict[str, str]:
    """Issuer name to base64 raw public key; a missing file is an empty map."""
    if path is None or not Path(path).exists():
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValueError(f"{path}: trust map must map issuer names to base64 keys")
    return data


def write_key_pair(signer: Ed25519Signer, out_dir: str | Path, trust_map: str | Path | None = None) -> tuple[Path, Path]:
    """Write the private key PEM and merge the issuer into a trust map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key_path = atomic_write(out / f"{signer.issuer}.pem", signer.private_pem())
    os.chmod(key_path, 0o600)

    trust_path = Path(trust_map) if trust_map is not None else out / "trust.json"
    trusted = load_trust_map(trust_path)
    trusted[signer.issuer] = signer.public_key_b64()
    atomic_write(trust_path, (json.dumps(trusted, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    logger.info("Wrote key for %s to %s", signer.issuer, key_path)
    return key_path, trust_path
