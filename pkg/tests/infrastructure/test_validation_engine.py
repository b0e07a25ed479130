from datetime import datetime, timezone

import pytest

from pdd.domain.errors import UnknownValidator
from pdd.domain.models import EffectTrace, ErrorOutcome, InvocationRecord, Outcome, PropertyRun
from pdd.infrastructure.bundle_reader import parse_bundle
from pdd.infrastructure.harness import session_factory
from pdd.infrastructure.seal_engine import seal_bundle
from pdd.infrastructure.validation_engine import (
    check_validator_requirements,
    load_pass,
    merge_traces,
    validate,
    validate_behavioral,
    validate_operational,
    validate_structural,
)
from tests.application.fakes import fake_factory
from tests.conftest import BUNDLES, edit_yaml

RUN = PropertyRun(seed=42, case_count=20)


def linear(request):
    if any(k not in request for k in ("transaction_id", "account_id", "amount_cents")):
        return {"error": {"kind": "invalid_request"}}, [], 2
    risk = round(min(1.0, request["amount_cents"] / 1e9), 6)
    return {"response": {"transaction_id": request["transaction_id"], "risk_score": risk, "decision": "approve"}}, [], 30


def failing(run):
    return {c.clause_id for r in run.results for c in r.failed_clauses}


def sealed(name, clock):
    return seal_bundle(parse_bundle(BUNDLES / f"{name}.protocol"), clock)


class TestValidatorRequirements:
    def test_bundled_versions_satisfy_fixture(self, fraud_sealed):
        check_validator_requirements(fraud_sealed)

    def test_unknown_validator_rejected_before_execution(self, fraud_bundle, clock):
        edit_yaml(
            fraud_bundle / "validators/validator-set.yaml",
            lambda d: d["validators"].append({"name": "fuzz-oracle", "version": ">=1.0.0"}),
        )
        bundle = seal_bundle(parse_bundle(fraud_bundle), clock)

        def never_called():
            raise AssertionError("session started")

        with pytest.raises(UnknownValidator, match="fuzz-oracle"):
            validate(bundle, never_called, RUN)

    def test_unsatisfied_version(self, fraud_bundle, clock):
        edit_yaml(
            fraud_bundle / "validators/validator-set.yaml",
            lambda d: d["validators"][0].update(version=">=0.5.0"),
        )
        with pytest.raises(UnknownValidator, match="schema-conformance"):
            check_validator_requirements(seal_bundle(parse_bundle(fraud_bundle), clock))


class TestValidateInProcess:
    def test_results_in_fixed_order_with_metrics(self, fraud_sealed):
        run = validate(fraud_sealed, fake_factory(linear), RUN)
        assert [(r.name, r.version) for r in run.results] == [
            ("schema-conformance", "0.4.2"),
            ("property-check", "0.9.1"),
            ("capability-monitor", "0.3.0"),
        ]
        assert run.admitted
        assert run.results[1].metrics == {"generated_cases": 100, "counterexamples": 0}
        assert run.results[2].metrics == {"max_latency_ms_p95": 30, "network_violations": 0, "filesystem_writes": 0}

    def test_merged_trace_is_numbered_from_one(self, fraud_sealed):
        run = validate(fraud_sealed, fake_factory(linear), RUN)
        assert [r.seq for r in run.trace.invocations] == list(range(1, len(run.trace.invocations) + 1))

    def test_load_pass_is_reproducible(self, fraud_sealed):
        first = load_pass(fraud_sealed, fake_factory(linear), RUN, requests=10)
        second = load_pass(fraud_sealed, fake_factory(linear), RUN, requests=10)
        assert [r.request for r in first.invocations] == [r.request for r in second.invocations]


class TestSingleValidators:
    def test_structural_and_operational_judge_a_trace(self, fraud_sealed):
        trace = load_pass(fraud_sealed, fake_factory(linear), RUN, requests=10)
        structural = validate_structural(fraud_sealed, trace)
        operational = validate_operational(fraud_sealed, trace)
        assert (structural.name, structural.result) == ("schema-conformance", "pass")
        assert [c.clause_id for c in structural.clauses] == ["request", "response", "errors"]
        assert (operational.name, operational.result) == ("capability-monitor", "pass")

    def test_behavioral_reports_each_property(self, fraud_sealed):
        result = validate_behavioral(fraud_sealed, fake_factory(linear), RUN)
        assert result.result == "pass"
        assert [c.clause_id for c in result.clauses] == [
            "deterministic_scoring", "score_range", "monotone_amount_risk", "invalid_request_fails_closed",
        ]


class TestMergeTraces:
    def test_renumbers_and_spans(self):
        early = datetime(2026, 1, 1, tzinfo=timezone.utc)
        late = datetime(2026, 1, 2, tzinfo=timezone.utc)

        def one(at, seq):
            record = InvocationRecord(seq, {"n": seq}, Outcome(error=ErrorOutcome("x")), (), 1, 1, at)
            return EffectTrace((record,), at, at)

        merged = merge_traces(one(late, 5), one(early, 9))
        assert [(r.seq, r.request["n"]) for r in merged.invocations] == [(1, 5), (2, 9)]
        assert (merged.started_at, merged.ended_at) == (early, late)


class TestValidateCandidates:
    def test_compliant_candidate_is_admitted(self, fraud_sealed, make_candidate, policy):
        run = validate(fraud_sealed, session_factory(make_candidate(), policy), RUN)
        assert run.admitted, failing(run)
        assert run.results[2].metrics["max_latency_ms_p95"] <= 75

    @pytest.mark.parametrize("plant, expected", [
        ("network", {"network_outbound"}),
        ("tempfile", {"filesystem"}),
        ("feature_calls", {"max_feature_store_calls_per_request"}),
        ("latency", {"max_latency_ms_p95"}),
        ("dependency", {"dependencies"}),
        ("missing_field", {"response"}),
        ("out_of_range", {"response", "score_range"}),
        ("nondeterministic", {"deterministic_scoring"}),
        ("non_monotone", {"monotone_amount_risk"}),
        ("late_effect", {"background_work"}),
    ])
    def test_planted_violation_is_caught(self, fraud_sealed, make_candidate, policy, plant, expected):
        candidate = make_candidate("fraud_score.py", "--plant", plant)
        run = validate(fraud_sealed, session_factory(candidate, policy), RUN)
        assert not run.admitted
        assert failing(run) == expected

    def test_network_plant_metrics(self, fraud_sealed, make_candidate, policy):
        candidate = make_candidate("fraud_score.py", "--plant", "network")
        metrics = validate(fraud_sealed, session_factory(candidate, policy), RUN).results[2].metrics
        assert metrics["network_violations"] > 0

    def test_replayed_write_breaks_idempotence(self, clock, make_candidate, policy):
        bundle = sealed("user-creation", clock)
        assert validate(bundle, session_factory(make_candidate("user_creation.py"), policy), RUN).admitted
        broken = make_candidate("user_creation.py", "--plant", "double_write")
        run = validate(bundle, session_factory(broken, policy), RUN)
        assert failing(run) == {"create_user_idempotent"}
        assert run.results[2].metrics["filesystem_writes"] > 0

    def test_suffixing_normalizer_is_not_idempotent(self, clock, make_candidate, policy):
        bundle = sealed("record-normalizer", clock)
        assert validate(bundle, session_factory(make_candidate("record_normalizer.py"), policy), RUN).admitted
        broken = make_candidate("record_normalizer.py", "--plant", "suffix")
        assert failing(validate(bundle, session_factory(broken, policy), RUN)) == {"normalization_idempotent"}
