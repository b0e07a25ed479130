"""Candidate manifests and artifact digests."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from pydantic import ValidationError

from pdd.domain.models import CandidateRef, DeclaredPackage
from pdd.infrastructure.canonical import DIGEST_PREFIX, document_digest
from pdd.infrastructure.wire_models import CandidateManifest


def path_digest(path: str | Path) -> str:
    """SHA-256 of a file's bytes, or of the canonical {relative path: digest} map of a directory."""
    p = Path(path)
    if p.is_file():
        return DIGEST_PREFIX + hashlib.sha256(p.read_bytes()).hexdigest()
    entries = {
        f.relative_to(p).as_posix(): DIGEST_PREFIX + hashlib.sha256(f.read_bytes()).hexdigest()
        for f in sorted(p.rglob("*"))
        if f.is_file() and "__pycache__" not in f.parts
    }
    return document_digest(entries)


def load_candidate(manifest_path: str | Path) -> CandidateRef:
    """Read a ``candidate.json`` and bind it to the digest of its artifact.

    Relative paths in the manifest, including launch-command arguments that
    name existing files, resolve against the manifest's directory.
    """
    manifest_file = Path(manifest_path)
    base = manifest_file.parent
    try:
        manifest = CandidateManifest.model_validate(json.loads(manifest_file.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ValueError(f"{manifest_file}: invalid candidate manifest: {exc}") from exc

    command = tuple(str(base / arg) if (base / arg).exists() else arg for arg in manifest.launch_command)
    artifact = base / manifest.artifact if manifest.artifact else None
    if artifact is None:
        scripts = [base / arg for arg in manifest.launch_command if (base / arg).is_file()]
        artifact = scripts[-1] if scripts else manifest_file
    return CandidateRef(
        artifact_id=manifest.artifact_id,
        artifact_digest=path_digest(artifact),
        launch_command=command,
        language=manifest.language,
        runtime=manifest.runtime,
        artifact_path=str(artifact),
        files=tuple(str(base / f) for f in manifest.files),
        dependencies=tuple(
            DeclaredPackage(d.name, d.version, str(base / d.path) if d.path else None) for d in manifest.dependencies
        ),
    )
