"""Atomic file writes and advisory locks shared by the registry, ledger and evidence stores."""
from __future__ import annotations

import fcntl
import os
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from pdd.domain.errors import WriteFailure
from pdd.infrastructure.canonical import canonical_bytes


def atomic_write(path: str | Path, data: bytes) -> Path:
    """Write *data* to a temp file beside *path*, fsync, then rename over it.

    Readers see either the old bytes or the new bytes, never a prefix.
    """
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise WriteFailure(f"Cannot write {target}: {exc}") from exc
    return target


def write_canonical(path: str | Path, doc: Any) -> Path:
    return atomic_write(path, canonical_bytes(doc))


@contextmanager
def exclusive_lock(path: str | Path) -> Iterator[None]:
    """Hold an exclusive ``flock`` on *path*, created if missing, for the block."""
    lock = Path(path)
    try:
        lock.parent.mkdir(parents=True, exist_ok=True)
        handle = open(lock, "a+")
    except OSError as exc:
        raise WriteFailure(f"Cannot lock {lock}: {exc}") from exc
    with handle:
        fcntl.flock(handle.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(handle.fileno(), fcntl.LOCK_UN)
