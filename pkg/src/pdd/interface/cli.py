import argparse
import json
import logging
import sys
import uuid
from pathlib import Path

from pdd.application.use_cases import (
    AdmissionOutcome,
    admit,
    attest,
    check_substitutability,
    generate_workload,
    load_evidence_file,
    negotiate,
    read_trace,
    remediate,
    resubmit_repair,
    seal,
)
from pdd.config import SYNTHETIC, SYNTHETIC_EPOCH, WALL, EnforcementPolicy, HarnessPolicy, Settings
from pdd.domain.errors import IntegrityError, NegotiationFailed, PddError
from pdd.domain.models import PropertyRun, SealedBundle
from pdd.domain.ports import Clock
from pdd.infrastructure.artifacts import load_candidate
from pdd.infrastructure.bundle_reader import parse_bundle
from pdd.infrastructure.canonical import canonical_bytes, is_digest
from pdd.infrastructure.clock import FixedClock, SystemClock
from pdd.infrastructure.documents import (
    block_to_document,
    genesis_to_document,
    repair_context_to_document,
    sealed_to_document,
    to_document,
)
from pdd.infrastructure.evidence_engine import verify_evidence
from pdd.infrastructure.ledger_engine import init_ledger, read_ledger, verify_chain
from pdd.infrastructure.refinement_engine import check_refinement
from pdd.infrastructure.registry_store import FileRegistry
from pdd.infrastructure.seal_engine import sealed_from_document
from pdd.infrastructure.signing import Ed25519Signer, load_trust_map, write_key_pair
from pdd.infrastructure.storage import write_canonical

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_INTEGRITY = 3


def _error_exit(msg: str, code: int = EXIT_USAGE) -> None:
    """Print error message to stderr and exit with *code*."""
    print(f"Error: {msg}", file=sys.stderr)
    sys.exit(code)


def _emit(args, doc, text_fn) -> None:
    """Print one canonical document in json mode, otherwise call *text_fn*."""
    if args.output == "json":
        print(canonical_bytes(doc).decode("utf-8"))
    else:
        text_fn()


def _header_fmt(fmt_spec: str) -> str:
    """Extract header-safe format from a value format spec, e.g. ">7.2f" → ">7"."""
    stripped = fmt_spec.rstrip("dfs%")
    dot = stripped.find(".")
    if dot != -1:
        stripped = stripped[:dot]
    return stripped


def _print_table(rows, columns, limit=50, key_fn=None, max_key=48, suffix="rows") -> None:
    """Generic table printer.

    Args:
        rows: list of objects to print.
        columns: list of (header, format_spec, value_fn) tuples; a format_spec
            of None marks the key column, sized to its longest value.
        key_fn: callable(row) -> str for the key column.
    """
    if not rows:
        return
    key_width = min(max(len(key_fn(r)) for r in rows), max_key) if key_fn else 0

    parts = []
    for header, fmt_spec, _value_fn in columns:
        if fmt_spec is None:
            parts.append(f"{header:<{max(key_width, len(header))}}")
        else:
            parts.append(f"{header:{_header_fmt(fmt_spec)}}")
    header_line = "  ".join(parts)
    print(header_line)
    print("-" * len(header_line))

    for r in rows[:limit]:
        parts = []
        for header, fmt_spec, value_fn in columns:
            if fmt_spec is None:
                key = key_fn(r)
                if len(key) > key_width:
                    key = "..." + key[-(key_width - 3):]
                parts.append(f"{key:<{max(key_width, len(header))}}")
            else:
                value = value_fn(r)
                parts.append(f"{'-' if value is None else value:{fmt_spec}}")
        print("  ".join(parts))

    if len(rows) > limit:
        print(f"  ... and {len(rows) - limit} more {suffix}")


# ── Shared resolution ────────────────────────────────────────────────


def _registry(args, settings: Settings) -> FileRegistry:
    return FileRegistry(args.registry or settings.registry)


def _trust(args, settings: Settings) -> dict[str, str]:
    return load_trust_map(args.trust or settings.trust_map)


def _signer(args, settings: Settings) -> Ed25519Signer:
    key = args.key or settings.signing_key
    if key is None:
        _error_exit("no signing key: set PDD_SIGNING_KEY or pass --key (create one with 'pdd keygen')")
    return Ed25519Signer.from_pem(key, args.issuer or settings.issuer)


def _load_bundle(ref: str, registry: FileRegistry, clock: Clock) -> SealedBundle:
    """Resolve a bundle directory, a sealed-bundle file, ``id@version`` or a digest."""
    path = Path(ref)
    if path.is_dir():
        return seal(path, clock)
    if path.is_file():
        return sealed_from_document(json.loads(path.read_text(encoding="utf-8")))
    if is_digest(ref):
        return registry.get_by_digest(ref)
    protocol_id, sep, version = ref.rpartition("@")
    if sep and protocol_id:
        return registry.get(protocol_id, version)
    raise ValueError(f"'{ref}' is not a bundle directory, sealed bundle file, id@version or digest")


def _harness(args) -> HarnessPolicy:
    return HarnessPolicy(
        deadline_ms=args.deadline_ms,
        clock=SYNTHETIC if args.synthetic_clock else WALL,
    )


def _clock(args) -> Clock:
    return FixedClock(SYNTHETIC_EPOCH) if getattr(args, "synthetic_clock", False) else SystemClock()


# ── Commands ─────────────────────────────────────────────────────────


def _cmd_seal(args) -> int:
    settings = Settings.from_env()
    sealed = seal(args.bundle, SystemClock())
    out = Path(args.out) if args.out else Path(args.bundle) / "evidence" / "sealed.json"
    write_canonical(out, sealed_to_document(sealed))
    doc = {"protocol_id": sealed.protocol_id, "version": sealed.version, "bundle_digest": sealed.bundle_digest,
           "path": str(out)}
    if args.publish:
        record = _registry(args, settings).publish(sealed, args.issuer or settings.issuer)
        doc["published"] = record.created
    _emit(args, doc, lambda: print(sealed.bundle_digest))
    return EXIT_OK


def _cmd_negotiate(args) -> int:
    settings = Settings.from_env()
    registry = _registry(args, settings)
    try:
        sealed = negotiate(parse_bundle(args.bundle), registry, SystemClock())
    except NegotiationFailed as exc:
        conflicts = [
            {
                "protocol_id": c.protocol_id,
                "kind": c.kind,
                "ranges": list(c.ranges),
                "available_versions": list(c.available_versions),
                "destinations": list(c.destinations),
                "detail": c.detail,
            }
            for c in exc.conflicts
        ]

        def text() -> None:
            print(f"Negotiation failed with {len(conflicts)} conflict(s):\n")
            _print_table(exc.conflicts, [
                ("Protocol", None, None),
                ("Kind", "<20", lambda c: c.kind),
                ("Detail", "<60", lambda c: c.detail or ", ".join(c.ranges)),
            ], key_fn=lambda c: c.protocol_id, suffix="conflicts")

        _emit(args, {"conflicts": conflicts}, text)
        return EXIT_FAILED

    out = Path(args.out) if args.out else Path(args.bundle) / "evidence" / "sealed.json"
    write_canonical(out, sealed_to_document(sealed))
    pins = sealed.bundle.provenance.get("pinned_dependencies", {})
    if args.publish:
        registry.publish(sealed, args.issuer or settings.issuer)

    def text() -> None:
        print(sealed.bundle_digest)
        for protocol_id, pin in sorted(pins.items()):
            print(f"  {protocol_id}@{pin['version']}  {pin['bundle_digest']}")

    _emit(args, {"bundle_digest": sealed.bundle_digest, "pinned_dependencies": pins, "path": str(out)}, text)
    return EXIT_OK


def _print_admission(outcome: AdmissionOutcome) -> None:
    result = outcome.result
    print(f"Protocol:   {result.protocol.protocol_id}@{result.protocol.version} ({result.protocol.bundle_digest})")
    print(f"Candidate:  {result.implementation.artifact_id} ({result.implementation.artifact_digest})")
    print(f"Decision:   {'admit' if outcome.admitted else 'reject'}  {outcome.result_id}")
    print(f"Written:    {outcome.path}\n")
    _print_table(list(outcome.run.results), [
        ("Validator", None, None),
        ("Version", "<8", lambda r: r.version),
        ("Result", "<6", lambda r: r.result),
        ("Metrics", "<60", lambda r: ", ".join(f"{k}={v}" for k, v in sorted(r.metrics.items()))),
    ], key_fn=lambda r: r.name, suffix="validators")
    failed = [(r.name, c) for r in outcome.run.results for c in r.failed_clauses]
    if failed:
        print("\nFailed clauses:\n")
        _print_table(failed, [
            ("Clause", None, None),
            ("Validator", "<20", lambda rc: rc[0]),
            ("Observed", ">10", lambda rc: rc[1].observed_value),
            ("Allowed", ">10", lambda rc: rc[1].allowed_value),
            ("Detail", "<50", lambda rc: rc[1].detail or rc[1].path or ""),
        ], key_fn=lambda rc: rc[1].clause_id, suffix="clauses")


def _record_run(args, settings: Settings, sealed, candidate, outcome: AdmissionOutcome) -> None:
    from pdd.infrastructure.run_store import RunStore

    store = RunStore(db_path=args.db or settings.runs_db, clock=_clock(args))
    try:
        store.save_run(str(uuid.uuid4()), sealed, candidate, args.seed, args.cases, outcome.run, outcome.result_id)
    finally:
        store.close()


def _finish_admission(args, settings, sealed, candidate, outcome: AdmissionOutcome) -> int:
    if args.record:
        _record_run(args, settings, sealed, candidate, outcome)
    _emit(args, to_document(outcome.result), lambda: _print_admission(outcome))
    return EXIT_OK if outcome.admitted else EXIT_FAILED


def _cmd_validate(args) -> int:
    settings = Settings.from_env()
    registry = _registry(args, settings)
    sealed = _load_bundle(args.bundle, registry, _clock(args))
    candidate = load_candidate(args.candidate)
    signer = _signer(args, settings)
    outcome = admit(
        sealed,
        candidate,
        _harness(args),
        PropertyRun(seed=args.seed, case_count=args.cases),
        _clock(args),
        signer,
        args.evidence_dir,
        registry if args.store else None,
    )
    return _finish_admission(args, settings, sealed, candidate, outcome)


def _cmd_verify_evidence(args) -> int:
    settings = Settings.from_env()
    evidence = load_evidence_file(args.evidence)
    registry = None if args.no_registry else _registry(args, settings)
    verdict = verify_evidence(
        evidence,
        _trust(args, settings),
        registry,
        expected_artifact_digest=args.artifact_digest,
        expected_bundle_digest=args.bundle_digest,
    )
    doc = {
        "evidence_id": evidence.evidence_id,
        "ok": verdict.ok,
        "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in verdict.checks],
    }

    def text() -> None:
        print(f"Evidence {evidence.evidence_id}: {'verified' if verdict.ok else 'FAILED'}\n")
        _print_table(list(verdict.checks), [
            ("Check", None, None),
            ("Result", "<6", lambda c: "pass" if c.passed else "fail"),
            ("Detail", "<60", lambda c: c.detail),
        ], key_fn=lambda c: c.name, suffix="checks")

    _emit(args, doc, text)
    return EXIT_OK if verdict.ok else EXIT_INTEGRITY


def _cmd_attest(args) -> int:
    settings = Settings.from_env()
    if args.genesis is None and args.trace is None:
        _error_exit("attest needs --genesis EVIDENCE_FILE, --trace TRACE_FILE, or both")
    signer = _signer(args, settings)
    trust = _trust(args, settings)
    doc: dict = {}
    if args.genesis is not None:
        ledger = init_ledger(args.ledger, load_evidence_file(args.genesis), signer)
        doc["genesis"] = genesis_to_document(ledger.genesis)
    blocks = []
    if args.trace is not None:
        registry = _registry(args, settings)
        if args.bundle:
            sealed = _load_bundle(args.bundle, registry, _clock(args))
        else:
            sealed = registry.get_by_digest(read_ledger(args.ledger).genesis.evidence.protocol.bundle_digest)
        blocks = attest(
            args.ledger,
            sealed,
            read_trace(args.trace),
            EnforcementPolicy(),
            SystemClock(),
            signer,
            trust,
            interval_size=args.interval_size,
            interval_seconds=args.interval_seconds,
            deployed_version=args.deployed_version,
        )
        doc["blocks"] = [block_to_document(b) for b in blocks]

    def text() -> None:
        if "genesis" in doc:
            print(f"Initialised ledger {args.ledger} ({doc['genesis']['ledger_block_id']})")
        _print_table(blocks, [
            ("Block", None, None),
            ("Decision", "<9", lambda b: b.attestation.decision),
            ("Invariant", "<40", lambda b: b.attestation.violated_invariant or ""),
            ("Observed", ">8", lambda b: b.attestation.observed_value),
            ("Allowed", ">8", lambda b: b.attestation.allowed_value),
            ("Action", "<10", lambda b: b.action.runtime),
            ("Context", "<28", lambda b: b.action.remediation_context or ""),
        ], key_fn=lambda b: b.ledger_block_id, suffix="blocks")

    _emit(args, doc, text)
    return EXIT_FAILED if any(b.attestation.decision != "pass" for b in blocks) else EXIT_OK


def _cmd_verify_ledger(args) -> int:
    settings = Settings.from_env()
    verdict = verify_chain(args.ledger, _trust(args, settings))
    doc = {"ok": verdict.ok, "length": verdict.length, "failed_index": verdict.failed_index, "reason": verdict.reason}

    def text() -> None:
        if verdict.ok:
            print(f"Ledger verified: {verdict.length} record(s)")
        else:
            print(f"Ledger FAILED at index {verdict.failed_index}: {verdict.reason}")

    _emit(args, doc, text)
    return EXIT_OK if verdict.ok else EXIT_INTEGRITY


def _cmd_refine_check(args) -> int:
    settings = Settings.from_env()
    registry = _registry(args, settings)
    clock = _clock(args)
    report = check_refinement(_load_bundle(args.p_prime, registry, clock), _load_bundle(args.p, registry, clock))
    doc = {
        "protocol_id": report.protocol_id,
        "refined_version": report.refined_version,
        "base_version": report.base_version,
        "refines": report.refines,
        "comparisons": [
            {"clause_id": c.clause_id, "group": c.group, "status": c.status, "detail": c.detail}
            for c in report.comparisons
        ],
    }

    def text() -> None:
        verb = "refines" if report.refines else "does NOT refine"
        print(f"{report.protocol_id} {report.refined_version} {verb} {report.base_version}\n")
        _print_table(list(report.comparisons), [
            ("Clause", None, None),
            ("Group", "<11", lambda c: c.group),
            ("Status", "<12", lambda c: c.status),
            ("Detail", "<60", lambda c: c.detail),
        ], limit=200, key_fn=lambda c: c.clause_id, suffix="clauses")

    _emit(args, doc, text)
    return EXIT_OK if report.refines else EXIT_FAILED


def _parse_env(pairs: list[str]) -> dict[str, str]:
    env = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"--env expects KEY=VALUE, got '{pair}'")
        env[key] = value
    return env


def _cmd_remediate(args) -> int:
    settings = Settings.from_env()
    registry = _registry(args, settings)
    trust = _trust(args, settings)
    context = remediate(args.ledger, args.block_id, registry, SystemClock(), trust, _parse_env(args.env))
    if args.candidate is None:
        _emit(args, repair_context_to_document(context), lambda: print(context.context_id))
        return EXIT_OK

    candidate = load_candidate(args.candidate)
    sealed = registry.get_by_digest(context.protocol.bundle_digest)
    outcome = resubmit_repair(
        context,
        candidate,
        _harness(args),
        registry,
        PropertyRun(seed=args.seed, case_count=args.cases),
        _clock(args),
        _signer(args, settings),
        args.evidence_dir,
    )
    if args.output != "json":
        print(f"Repair context: {context.context_id}")
    return _finish_admission(args, settings, sealed, candidate, outcome)


def _cmd_substitutability(args) -> int:
    settings = Settings.from_env()
    sealed = _load_bundle(args.bundle, _registry(args, settings), _clock(args))
    candidates = [load_candidate(path) for path in args.candidates]
    workload = generate_workload(sealed, args.seed, args.requests)
    report = check_substitutability(sealed, candidates, workload, _harness(args))
    doc = {
        "protocol_id": report.protocol_id,
        "substitutable": report.substitutable,
        "verdicts": [
            {"artifact_id": v.artifact_id, "passed": v.passed, "failing_clauses": list(v.failing_clauses)}
            for v in report.verdicts
        ],
    }

    def text() -> None:
        print(f"{report.protocol_id}: {'substitutable' if report.substitutable else 'NOT substitutable'}\n")
        _print_table(list(report.verdicts), [
            ("Candidate", None, None),
            ("Result", "<6", lambda v: "pass" if v.passed else "fail"),
            ("Failing clauses", "<60", lambda v: ", ".join(v.failing_clauses)),
        ], key_fn=lambda v: v.artifact_id, suffix="candidates")

    _emit(args, doc, text)
    return EXIT_OK if report.substitutable else EXIT_FAILED


def _cmd_registry(args) -> int:
    settings = Settings.from_env()
    registry = _registry(args, settings)
    if args.registry_command == "publish":
        sealed = _load_bundle(args.bundle, registry, _clock(args))
        record = registry.publish(sealed, args.publisher or args.issuer or settings.issuer)
        doc = {
            "protocol_id": record.protocol_id,
            "version": record.version,
            "bundle_digest": record.bundle_digest,
            "created": record.created,
            "publisher": record.publisher,
        }
        state = "published" if record.created else "already published"
        _emit(args, doc, lambda: print(f"{record.protocol_id}@{record.version} {state} as {record.bundle_digest}"))
    elif args.registry_command == "get":
        sealed = registry.get(args.protocol_id, args.version)
        if args.out:
            write_canonical(args.out, sealed_to_document(sealed))
        _emit(args, sealed_to_document(sealed), lambda: print(sealed.bundle_digest))
    else:
        entries = registry.list()

        def text() -> None:
            if not entries:
                print("Registry is empty.")
                return
            _print_table(entries, [
                ("Protocol", None, None),
                ("Version", "<10", lambda e: e.version),
                ("Digest", "<71", lambda e: e.bundle_digest),
            ], limit=500, key_fn=lambda e: e.protocol_id, suffix="entries")

        _emit(
            args,
            {"entries": [{"protocol_id": e.protocol_id, "version": e.version, "bundle_digest": e.bundle_digest}
                         for e in entries]},
            text,
        )
    return EXIT_OK


def _cmd_keygen(args) -> int:
    signer = Ed25519Signer.generate(args.issuer or Settings.from_env().issuer)
    key_path, trust_path = write_key_pair(signer, args.out, args.trust_map)
    doc = {"issuer": signer.issuer, "key": str(key_path), "trust_map": str(trust_path),
           "public_key": signer.public_key_b64()}
    _emit(args, doc, lambda: print(f"Wrote {key_path}\nTrusted {signer.issuer} in {trust_path}"))
    return EXIT_OK


def _print_runs(runs: list[dict]) -> None:
    """Print past admission runs in a table."""
    if not runs:
        print("No runs found.")
        return
    header = (
        f"{'Run ID':<36}  "
        f"{'Date':<19}  "
        f"{'Protocol':<24}  "
        f"{'Candidate':<28}  "
        f"{'Result':<6}  "
        f"{'Outcome':<22}"
    )
    print(header)
    print("-" * len(header))
    for r in runs:
        protocol = f"{r['protocol_id']}@{r['version']}"
        print(
            f"{r['run_id']:<36}  "
            f"{r['created_at'].strftime('%Y-%m-%d %H:%M:%S'):<19}  "
            f"{protocol:<24}  "
            f"{r['artifact_id']:<28}  "
            f"{'admit' if r['admitted'] else 'reject':<6}  "
            f"{r['outcome_id']:<22}"
        )


def _cmd_runs(args) -> int:
    from pdd.infrastructure.run_store import RunStore

    settings = Settings.from_env()
    store = RunStore(db_path=args.db or settings.runs_db)
    try:
        if args.run_id:
            validators = store.get_validator_results(args.run_id)
            clauses = store.get_clause_outcomes(args.run_id)
            doc = {"run_id": args.run_id, "validators": validators, "clauses": clauses}

            def text() -> None:
                _print_table(clauses, [
                    ("Clause", None, None),
                    ("Validator", "<20", lambda c: c["validator"]),
                    ("Result", "<6", lambda c: "pass" if c["passed"] else "fail"),
                    ("Observed", ">10", lambda c: c["observed_value"]),
                    ("Allowed", ">10", lambda c: c["allowed_value"]),
                ], limit=500, key_fn=lambda c: c["clause_id"], suffix="clauses")
        else:
            runs = store.list_runs(args.protocol)
            doc = {"runs": [{**r, "created_at": r["created_at"].isoformat()} for r in runs]}

            def text() -> None:
                _print_runs(runs)
    finally:
        store.close()
    _emit(args, doc, text)
    return EXIT_OK


# ── Parser ───────────────────────────────────────────────────────────


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--output", choices=("text", "json"), default="text",
        help="Result format on standard output (default: text)",
    )
    common.add_argument("--log-level", metavar="LEVEL", default=None, help="Logging level (default: PDD_LOG_LEVEL)")
    common.add_argument("--registry", metavar="DIR", default=None, help="Registry root (default: PDD_REGISTRY)")
    common.add_argument("--trust", metavar="PATH", default=None, help="Trust map (default: PDD_TRUST_MAP)")
    common.add_argument("--key", metavar="PATH", default=None, help="Signing key PEM (default: PDD_SIGNING_KEY)")
    common.add_argument("--issuer", metavar="NAME", default=None, help="Issuer identity (default: PDD_ISSUER)")
    return common


def _run_options() -> argparse.ArgumentParser:
    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--seed", type=int, default=0, help="Seed for generated cases (default: 0)")
    run.add_argument("--cases", type=int, default=100, help="Minimum cases per property (default: 100)")
    run.add_argument(
        "--synthetic-clock", action="store_true",
        help="Use candidate-declared durations instead of wall time",
    )
    run.add_argument("--deadline-ms", type=int, default=2000, help="Per-invocation deadline (default: 2000)")
    run.add_argument(
        "--evidence-dir", metavar="DIR", default="evidence",
        help="Where evidence and rejection files are written (default: ./evidence)",
    )
    run.add_argument("--record", action="store_true", help="Record the run in the DuckDB run history")
    run.add_argument("--db", metavar="PATH", default=None, help="DuckDB file (default: PDD_RUNS_DB)")
    return run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdd",
        description="Protocol bundle admission, evidence and runtime attestation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    run = _run_options()

    p = sub.add_parser("seal", parents=[common], help="Parse and seal a protocol bundle")
    p.add_argument("bundle", help="Bundle directory containing protocol.yaml")
    p.add_argument("--out", metavar="PATH", help="Sealed bundle file (default: BUNDLE/evidence/sealed.json)")
    p.add_argument("--publish", action="store_true", help="Also publish to the registry")
    p.set_defaults(func=_cmd_seal)

    p = sub.add_parser("negotiate", parents=[common], help="Pin dependencies from the registry and seal")
    p.add_argument("bundle", help="Bundle directory containing protocol.yaml")
    p.add_argument("--out", metavar="PATH", help="Sealed bundle file (default: BUNDLE/evidence/sealed.json)")
    p.add_argument("--publish", action="store_true", help="Also publish to the registry")
    p.set_defaults(func=_cmd_negotiate)

    p = sub.add_parser("validate", parents=[common, run], help="Validate a candidate and emit evidence")
    p.add_argument("bundle", help="Bundle directory, sealed file, id@version or digest")
    p.add_argument("candidate", help="Candidate manifest (candidate.json)")
    p.add_argument("--store", action="store_true", help="Also store the result in the registry evidence store")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("verify-evidence", parents=[common], help="Verify a signed evidence object")
    p.add_argument("evidence", help="Evidence file")
    p.add_argument("--artifact-digest", metavar="DIGEST", help="Require this artifact digest")
    p.add_argument("--bundle-digest", metavar="DIGEST", help="Require this bundle digest")
    p.add_argument("--no-registry", action="store_true", help="Skip the registry binding check")
    p.set_defaults(func=_cmd_verify_evidence)

    p = sub.add_parser("attest", parents=[common], help="Start a ledger or append attestation blocks")
    p.add_argument("ledger", help="Ledger directory (holds runtime-ledger.jsonl)")
    p.add_argument("--genesis", metavar="EVIDENCE", help="Initialise the ledger from admission evidence")
    p.add_argument("--trace", metavar="PATH", help="Observation trace to attest")
    p.add_argument("--bundle", metavar="REF", help="Bundle ref (default: the genesis evidence's bundle)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--interval-size", type=int, default=None, help="Observations per block (default: 100)")
    group.add_argument("--interval-seconds", type=float, default=None, help="Time window per block")
    p.add_argument("--deployed-version", metavar="NAME", help="Deployed version recorded in blocks")
    p.set_defaults(func=_cmd_attest)

    p = sub.add_parser("verify-ledger", parents=[common], help="Verify a runtime ledger")
    p.add_argument("ledger", help="Ledger directory")
    p.set_defaults(func=_cmd_verify_ledger)

    p = sub.add_parser("refine-check", parents=[common], help="Check that P' refines P")
    p.add_argument("p_prime", help="Refined bundle ref")
    p.add_argument("p", help="Base bundle ref")
    p.set_defaults(func=_cmd_refine_check)

    p = sub.add_parser("remediate", parents=[common, run], help="Build a repair context from a violation block")
    p.add_argument("ledger", help="Ledger directory")
    p.add_argument("block_id", help="Violation block id")
    p.add_argument("--env", action="append", default=[], metavar="KEY=VALUE", help="Environment metadata")
    p.add_argument("--candidate", metavar="MANIFEST", help="Resubmit this repaired candidate for admission")
    p.set_defaults(func=_cmd_remediate)

    p = sub.add_parser("substitutability", parents=[common, run], help="Run one client workload on candidates")
    p.add_argument("bundle", help="Bundle ref")
    p.add_argument("candidates", nargs="+", help="Candidate manifests")
    p.add_argument("--requests", type=int, default=50, help="Workload size (default: 50)")
    p.set_defaults(func=_cmd_substitutability)

    p = sub.add_parser("registry", help="Publish, fetch and list sealed bundles")
    reg = p.add_subparsers(dest="registry_command", required=True)
    rp = reg.add_parser("publish", parents=[common], help="Publish a bundle")
    rp.add_argument("bundle", help="Bundle directory or sealed file")
    rp.add_argument("--publisher", metavar="NAME", help="Publisher identity (default: issuer)")
    rp = reg.add_parser("get", parents=[common], help="Fetch a bundle")
    rp.add_argument("protocol_id")
    rp.add_argument("version")
    rp.add_argument("--out", metavar="PATH", help="Write the sealed bundle document here")
    reg.add_parser("list", parents=[common], help="List published bundles")
    p.set_defaults(func=_cmd_registry)

    p = sub.add_parser("keygen", parents=[common], help="Create an Ed25519 signing key")
    p.add_argument("--out", metavar="DIR", default=".", help="Key directory (default: .)")
    p.add_argument("--trust-map", metavar="PATH", help="Trust map to update (default: OUT/trust.json)")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("runs", parents=[common], help="Show recorded admission runs")
    p.add_argument("--run-id", metavar="ID", help="Show clause outcomes for one run")
    p.add_argument("--protocol", metavar="ID", help="Only runs for this protocol")
    p.add_argument("--db", metavar="PATH", default=None, help="DuckDB file (default: PDD_RUNS_DB)")
    p.set_defaults(func=_cmd_runs)
    return parser


def _configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _fail(args, exc: Exception, code: int) -> int:
    if getattr(args, "output", "text") == "json":
        print(canonical_bytes({"error": {"kind": type(exc).__name__, "message": str(exc)}}).decode("utf-8"))
    print(f"Error: {exc}", file=sys.stderr)
    return code


def main() -> None:
    parser = build_parser()
    args = parser.parse_args()
    _configure_logging(args.log_level or Settings.from_env().log_level)

    try:
        code = args.func(args)
    except IntegrityError as exc:
        code = _fail(args, exc, EXIT_INTEGRITY)
    except (PddError, OSError, ValueError) as exc:
        logger.debug("Command failed", exc_info=True)
        code = _fail(args, exc, EXIT_USAGE)
    sys.exit(code)
