"""Structural, behavioral and operational validation of one candidate."""
from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor

from pdd.config import CAPABILITY_VALIDATOR, PROPERTY_VALIDATOR, SCHEMA_VALIDATOR
from pdd.domain.errors import UnknownValidator
from pdd.domain.models import (
    OPERATIONAL,
    STRUCTURAL,
    EffectTrace,
    InvocationRecord,
    PropertyRun,
    SealedBundle,
    SemVer,
    ValidationRun,
    ValidatorResult,
)
from pdd.domain.ports import SessionFactory
from pdd.infrastructure.guarantee_compiler import compile_guarantees, p95
from pdd.infrastructure.property_engine import case_seed, check_property, generate_value

logger = logging.getLogger(__name__)

KNOWN_VALIDATORS = dict([SCHEMA_VALIDATOR, PROPERTY_VALIDATOR, CAPABILITY_VALIDATOR])
LOAD_PASS_REQUESTS = 100


def check_validator_requirements(sealed: SealedBundle) -> None:
    """Raise before any execution when a required validator is unavailable."""
    for requirement in sealed.bundle.validator_requirements:
        version = KNOWN_VALIDATORS.get(requirement.name)
        if version is None:
            raise UnknownValidator(f"Bundle requires unknown validator '{requirement.name}'")
        if not requirement.constraint.contains(SemVer.parse(version)):
            raise UnknownValidator(
                f"Validator {requirement.name} {version} does not satisfy '{requirement.constraint}'"
            )


def _result(name_version: tuple[str, str], clauses, metrics) -> ValidatorResult:
    name, version = name_version
    clauses = tuple(clauses)
    return ValidatorResult(
        name=name,
        version=version,
        result="pass" if all(c.passed for c in clauses) else "fail",
        clauses=clauses,
        metrics=metrics,
    )


def validate_structural(sealed: SealedBundle, trace: EffectTrace) -> ValidatorResult:
    surface = compile_guarantees(sealed)
    outcomes = [clause.evaluate(trace) for clause in surface.group(STRUCTURAL)]
    return _result(SCHEMA_VALIDATOR, outcomes, {})


def validate_operational(sealed: SealedBundle, trace: EffectTrace) -> ValidatorResult:
    surface = compile_guarantees(sealed)
    outcomes = [clause.evaluate(trace) for clause in surface.group(OPERATIONAL)]
    manifest = sealed.bundle.operational
    effects = [e for r in trace.invocations for e in r.effects]
    network_violations = sum(
        1
        for e in effects
        if e.kind == "network_call" and manifest.deny_other_outbound and e.target not in manifest.network_allowlist
    )
    metrics = {
        "max_latency_ms_p95": p95([r.latency_ms for r in trace.invocations]),
        "network_violations": network_violations,
        "filesystem_writes": sum(1 for e in effects if e.kind == "fs_write"),
    }
    return _result(CAPABILITY_VALIDATOR, outcomes, metrics)


def run_behavioral(
    sealed: SealedBundle, session_factory: SessionFactory, run: PropertyRun
) -> tuple[ValidatorResult, EffectTrace]:
    """Check every behavioral property in one session; returns the result and its trace."""
    session = session_factory()
    try:
        reports = [
            check_property(prop, sealed.bundle.structural, session, run) for prop in sealed.bundle.behavioral
        ]
        trace = session.collect_trace()
    finally:
        session.close()
    metrics = {
        "generated_cases": max((r.cases for r in reports), default=0),
        "counterexamples": sum(1 for r in reports if not r.outcome.passed),
    }
    return _result(PROPERTY_VALIDATOR, [r.outcome for r in reports], metrics), trace


def validate_behavioral(sealed: SealedBundle, session_factory: SessionFactory, run: PropertyRun) -> ValidatorResult:
    return run_behavioral(sealed, session_factory, run)[0]


def load_pass(
    sealed: SealedBundle, session_factory: SessionFactory, run: PropertyRun, requests: int = LOAD_PASS_REQUESTS
) -> EffectTrace:
    """Drive schema-valid traffic through a fresh session for the operational checks."""
    session = session_factory()
    try:
        for index in range(requests):
            rng = random.Random(case_seed(run.seed, "load-pass", index))
            session.invoke(generate_value(sealed.bundle.structural.request, rng))
        return session.collect_trace()
    finally:
        session.close()


def merge_traces(*traces: EffectTrace) -> EffectTrace:
    """Concatenate traces in argument order, renumbering seq from 1."""
    invocations = []
    for trace in traces:
        for record in trace.invocations:
            invocations.append(
                InvocationRecord(
                    seq=len(invocations) + 1,
                    request=record.request,
                    outcome=record.outcome,
                    effects=record.effects,
                    latency_ms=record.latency_ms,
                    peak_memory_mb=record.peak_memory_mb,
                    at=record.at,
                    timed_out=record.timed_out,
                )
            )
    return EffectTrace(
        invocations=tuple(invocations),
        started_at=min(t.started_at for t in traces),
        ended_at=max(t.ended_at for t in traces),
    )


def validate(sealed: SealedBundle, session_factory: SessionFactory, run: PropertyRun) -> ValidationRun:
    """Run all three validators; admission is their conjunction."""
    check_validator_requirements(sealed)
    with ThreadPoolExecutor(max_workers=2) as pool:
        behavioral_future = pool.submit(run_behavioral, sealed, session_factory, run)
        load_future = pool.submit(load_pass, sealed, session_factory, run)
        behavioral, behavioral_trace = behavioral_future.result()
        load_trace = load_future.result()
    trace = merge_traces(behavioral_trace, load_trace)
    results = (
        validate_structural(sealed, trace),
        behavioral,
        validate_operational(sealed, trace),
    )
    for result in results:
        logger.info("%s %s: %s", result.name, result.version, result.result)
    return ValidationRun(results=results, trace=trace)
