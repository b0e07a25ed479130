import json
import shutil
import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest
import yaml

from pdd.config import CAPABILITY_VALIDATOR, PROPERTY_VALIDATOR, SCHEMA_VALIDATOR, SYNTHETIC, HarnessPolicy
from pdd.domain.models import (
    EffectEvent,
    EffectTrace,
    InvocationRecord,
    Outcome,
    ValidationRun,
    ValidatorResult,
)
from pdd.infrastructure.artifacts import load_candidate
from pdd.infrastructure.bundle_reader import parse_bundle
from pdd.infrastructure.clock import FixedClock
from pdd.infrastructure.evidence_engine import build_discovery_log, build_evidence
from pdd.infrastructure.seal_engine import seal_bundle
from pdd.infrastructure.signing import Ed25519Signer

FIXTURES = Path(__file__).parent / "fixtures"
BUNDLES = FIXTURES / "bundles"
CANDIDATES = FIXTURES / "candidates"

ISSUER = "validation-engine.test"
T0 = datetime(2026, 3, 14, 9, 30, tzinfo=timezone.utc)

FEATURE_CALL = EffectEvent("network_call", "feature-store.internal:443")


def copy_bundle(name: str, dest: Path) -> Path:
    """Copy fixture bundle *name* (e.g. ``fraud-score``) under *dest*."""
    target = dest / f"{name}.protocol"
    shutil.copytree(BUNDLES / f"{name}.protocol", target)
    return target


def edit_yaml(path: Path, edit) -> None:
    """Load *path*, let *edit* mutate the document in place, write it back."""
    doc = yaml.safe_load(path.read_text())
    edit(doc)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def write_candidate(
    directory: Path,
    script: str,
    *args: str,
    artifact_id: str | None = None,
) -> Path:
    """Write a ``candidate.json`` launching a fixture script with the running interpreter."""
    directory.mkdir(parents=True, exist_ok=True)
    name = artifact_id or f"{Path(script).stem}-{'-'.join(a.lstrip('-') for a in args) or 'plain'}"
    manifest = {
        "artifact_id": name,
        "launch_command": [sys.executable, str(CANDIDATES / script), *args],
        "language": "python",
        "runtime": f"cpython-{sys.version_info.major}.{sys.version_info.minor}",
        "artifact": str(CANDIDATES / script),
        "dependencies": [{"name": "risk-common", "version": "2.3.1"}],
    }
    path = directory / f"{name}.candidate.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def write_bundle(
    root: Path,
    protocol_id: str,
    version: str,
    dependencies: tuple[tuple[str, str], ...] = (),
    allowlist: tuple[str, ...] = (),
    latency: int | None = 100,
) -> Path:
    """Write a minimal single-file-per-group bundle for resolution and refinement tests."""
    bundle = root / f"{protocol_id}-{version}.protocol"
    bundle.mkdir(parents=True)
    manifest = {
        "protocol_id": protocol_id,
        "version": version,
        "invariants": {
            "structural": "schema.yaml",
            "behavioral": "properties.yaml",
            "operational": "capabilities.yaml",
        },
    }
    if dependencies:
        manifest["dependencies"] = [{"protocol_id": p, "version_range": r} for p, r in dependencies]
    (bundle / "protocol.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    (bundle / "schema.yaml").write_text(yaml.safe_dump({
        "request": {"type": "object", "required": ["id"], "properties": {"id": "string"}},
        "response": {"type": "object", "required": ["ok"], "properties": {"ok": "string"}},
        "errors": ["invalid_request"],
    }))
    (bundle / "properties.yaml").write_text(yaml.safe_dump({
        "properties": [{"name": "stable", "kind": "determinism"}],
    }))
    resources = {} if latency is None else {"max_latency_ms_p95": latency}
    (bundle / "capabilities.yaml").write_text(yaml.safe_dump({
        "capabilities": {
            "network": {"outbound_allowlist": list(allowlist), "deny_other_outbound": True},
            "resources": resources,
        },
    }))
    return bundle


@pytest.fixture
def clock() -> FixedClock:
    return FixedClock(T0)


@pytest.fixture
def signer() -> Ed25519Signer:
    return Ed25519Signer.generate(ISSUER)


@pytest.fixture
def trust(signer) -> dict[str, str]:
    return {signer.issuer: signer.public_key_b64()}


@pytest.fixture
def policy() -> HarnessPolicy:
    return HarnessPolicy(clock=SYNTHETIC, grace_ms=100)


@pytest.fixture
def fraud_bundle(tmp_path) -> Path:
    return copy_bundle("fraud-score", tmp_path)


@pytest.fixture
def fraud_sealed(clock):
    return seal_bundle(parse_bundle(BUNDLES / "fraud-score.protocol"), clock)


@pytest.fixture
def make_candidate(tmp_path):
    """Factory returning a ``CandidateRef`` for a fixture script and its arguments."""

    def make(script: str = "fraud_score.py", *args: str, artifact_id: str | None = None):
        return load_candidate(write_candidate(tmp_path / "candidates", script, *args, artifact_id=artifact_id))

    return make


def observation(
    seq: int,
    at: datetime,
    amount: int = 100_000_000,
    feature_calls: int = 1,
    latency: float = 30.0,
) -> InvocationRecord:
    """One production fraud-score request as a runtime monitor would record it."""
    risk = round(min(1.0, amount / 1e9), 6)
    request = {"transaction_id": f"txn-{seq}", "account_id": "acct-1", "amount_cents": amount}
    effects = (EffectEvent("secret_access", "FEATURE_STORE_TOKEN"),) + (FEATURE_CALL,) * feature_calls
    return InvocationRecord(
        seq=seq,
        request=request,
        outcome=Outcome(response={"transaction_id": f"txn-{seq}", "risk_score": risk, "decision": "approve"}),
        effects=effects,
        latency_ms=latency,
        peak_memory_mb=48.0,
        at=at,
    )


def runtime_trace(
    count: int,
    start: datetime = T0,
    spacing_s: float = 1.0,
    overrides: dict[int, dict] | None = None,
) -> EffectTrace:
    """*count* observations; *overrides* maps a seq to ``observation`` keyword overrides."""
    overrides = overrides or {}
    records = tuple(
        observation(seq, start + timedelta(seconds=(seq - 1) * spacing_s), **overrides.get(seq, {}))
        for seq in range(1, count + 1)
    )
    return EffectTrace(invocations=records, started_at=start, ended_at=records[-1].at if records else start)


def passing_run(trace: EffectTrace) -> ValidationRun:
    results = tuple(
        ValidatorResult(name, version, "pass", (), {})
        for name, version in (SCHEMA_VALIDATOR, PROPERTY_VALIDATOR, CAPABILITY_VALIDATOR)
    )
    return ValidationRun(results=results, trace=trace)


@pytest.fixture
def admitted_evidence(fraud_sealed, make_candidate, clock, signer):
    """Signed admission evidence for the compliant fraud-score candidate."""
    candidate = make_candidate(artifact_id="fraud-score-py-1.0.0")
    run = passing_run(runtime_trace(3))
    log = build_discovery_log(candidate, run.results, [run.trace], fraud_sealed)
    return build_evidence(fraud_sealed, candidate, run, clock, signer, log)
