"""Canonical document encoding and SHA-256 digests.

Every signed or content-addressed artifact goes through ``canonical_bytes``:
map keys sorted, compact separators, UTF-8, shortest round-trip floats.
"""
from __future__ import annotations

import hashlib
import json
import math
from datetime import datetime, timezone
from decimal import Decimal
from typing import Any

from pdd.domain.errors import NonCanonicalizable

DIGEST_PREFIX = "sha256:"


def _normalize(value: Any, path: str) -> Any:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise NonCanonicalizable(f"Non-finite number at {path or '/'}")
        return value
    if isinstance(value, Decimal):
        if not value.is_finite():
            raise NonCanonicalizable(f"Non-finite number at {path or '/'}")
        if value == value.to_integral_value() and value.as_tuple().exponent >= 0:
            return int(value)
        return float(value)
    if isinstance(value, dict):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise NonCanonicalizable(f"Non-string key {key!r} at {path or '/'}")
            out[key] = _normalize(item, f"{path}/{key}")
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize(item, f"{path}/{i}") for i, item in enumerate(value)]
    raise NonCanonicalizable(f"Unsupported value of type {type(value).__name__} at {path or '/'}")


def canonical_bytes(doc: Any) -> bytes:
    normalized = _normalize(doc, "")
    text = json.dumps(
        normalized,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def sha256_digest(data: bytes) -> str:
    return DIGEST_PREFIX + hashlib.sha256(data).hexdigest()


def document_digest(doc: Any) -> str:
    return sha256_digest(canonical_bytes(doc))


def digest_hex(digest: str) -> str:
    """Strip the ``sha256:`` prefix."""
    return digest.removeprefix(DIGEST_PREFIX)


def is_digest(value: str) -> bool:
    hexpart = value.removeprefix(DIGEST_PREFIX)
    return (
        value.startswith(DIGEST_PREFIX)
        and len(hexpart) == 64
        and all(c in "0123456789abcdef" for c in hexpart)
    )


def load_canonical(data: bytes) -> Any:
    return json.loads(data.decode("utf-8"))


def format_utc(moment: datetime) -> str:
    """RFC 3339 UTC with a ``Z`` suffix; sub-second precision kept only when present."""
    moment = moment.astimezone(timezone.utc)
    if moment.microsecond:
        return moment.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_utc(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00")).astimezone(timezone.utc)
