import pytest

from pdd.domain.errors import (
    DanglingReference,
    GrammarError,
    MissingInvariantFile,
    MissingManifest,
)
from pdd.infrastructure.bundle_reader import (
    ISO_3166_ALPHA2_PATTERN,
    emit_bundle,
    load_restricted_yaml,
    parse_bundle,
)
from tests.conftest import BUNDLES, copy_bundle, edit_yaml

SCHEMA = "structural/request-response.schema.yaml"
PROPERTIES = "behavioral/scoring.properties.yaml"
CAPABILITIES = "operational/capabilities.yaml"


class TestParseFraudScore:
    @pytest.fixture(scope="class")
    def bundle(self):
        return parse_bundle(BUNDLES / "fraud-score.protocol")

    def test_identity(self, bundle):
        assert bundle.protocol_id == "fraud-score"
        assert bundle.version == "1.0.0"
        assert bundle.component == "risk.scoring.FraudScore"

    def test_string_shorthand(self, bundle):
        assert bundle.structural.request.properties["transaction_id"].kind == "string"

    def test_named_format_becomes_pattern(self, bundle):
        node = bundle.structural.request.properties["merchant_country"]
        assert node.pattern == ISO_3166_ALPHA2_PATTERN

    def test_pipe_separated_enum_and_errors(self, bundle):
        decision = bundle.structural.response.properties["decision"]
        assert decision.enum_values == ("approve", "review", "decline")
        assert bundle.structural.errors == ("invalid_request", "dependency_unavailable")

    def test_properties_in_declaration_order(self, bundle):
        assert [p.name for p in bundle.behavioral] == [
            "deterministic_scoring",
            "score_range",
            "monotone_amount_risk",
            "invalid_request_fails_closed",
        ]

    def test_comma_quantifier(self, bundle):
        assert bundle.behavioral[2].quantifier == ("r1", "r2")

    def test_default_case_count(self, bundle):
        assert all(p.case_count == 100 for p in bundle.behavioral)

    def test_budget_stem_uses_dashes(self, bundle):
        assert bundle.operational.per_request_call_budgets == {"feature-store": 1}

    def test_capabilities(self, bundle):
        caps = bundle.operational
        assert caps.network_allowlist == ("feature-store.internal:443",)
        assert caps.fs_write == ()
        assert caps.max_latency_ms_p95 == 75
        assert caps.secrets_allowlist == ("FEATURE_STORE_TOKEN",)
        assert not caps.background_work_allowed

    def test_validator_requirements(self, bundle):
        assert [r.name for r in bundle.validator_requirements] == [
            "schema-conformance",
            "property-check",
            "capability-monitor",
        ]

    def test_documents_manifest_first(self, bundle):
        assert [d.path for d in bundle.documents] == [
            "protocol.yaml",
            SCHEMA,
            PROPERTIES,
            CAPABILITIES,
            "validators/validator-set.yaml",
        ]

    def test_extra_manifest_keys_tolerated(self, tmp_path):
        root = copy_bundle("fraud-score", tmp_path)
        edit_yaml(root / "protocol.yaml", lambda d: d.update(evidence={"admission": "evidence/"}))
        assert parse_bundle(root).protocol_id == "fraud-score"


class TestReferences:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingManifest):
            parse_bundle(tmp_path)

    def test_dangling_reference(self, fraud_bundle):
        (fraud_bundle / CAPABILITIES).unlink()
        with pytest.raises(DanglingReference) as exc_info:
            parse_bundle(fraud_bundle)
        assert exc_info.value.reference == CAPABILITIES

    def test_missing_invariant_key(self, fraud_bundle):
        edit_yaml(fraud_bundle / "protocol.yaml", lambda d: d["invariants"].pop("operational"))
        with pytest.raises(MissingInvariantFile):
            parse_bundle(fraud_bundle)

    def test_bad_version(self, fraud_bundle):
        edit_yaml(fraud_bundle / "protocol.yaml", lambda d: d.update(version="1.0"))
        with pytest.raises(GrammarError, match="/version"):
            parse_bundle(fraud_bundle)


class TestRestrictedYaml:
    def test_alias_rejected(self):
        with pytest.raises(GrammarError, match="anchor|alias"):
            load_restricted_yaml("a: &x 1\nb: *x\n", "f.yaml")

    def test_explicit_tag_rejected(self):
        with pytest.raises(GrammarError, match="tag"):
            load_restricted_yaml("a: !!python/name:os.system\n", "f.yaml")

    def test_timestamps_stay_strings(self):
        assert load_restricted_yaml("at: 2026-03-14\n", "f.yaml") == {"at": "2026-03-14"}

    def test_invalid_yaml(self):
        with pytest.raises(GrammarError, match="invalid YAML"):
            load_restricted_yaml("a: [1, 2\n", "f.yaml")


class TestGrammar:
    def test_unknown_schema_key(self, fraud_bundle):
        edit_yaml(fraud_bundle / SCHEMA, lambda d: d["request"]["properties"]["amount_cents"].update(nullable=True))
        with pytest.raises(GrammarError) as exc_info:
            parse_bundle(fraud_bundle)
        assert exc_info.value.path == "/request/properties/amount_cents"

    def test_required_field_must_be_declared(self, fraud_bundle):
        edit_yaml(fraud_bundle / SCHEMA, lambda d: d["request"]["required"].append("card_token"))
        with pytest.raises(GrammarError, match="card_token"):
            parse_bundle(fraud_bundle)

    def test_min_above_max(self, fraud_bundle):
        edit_yaml(fraud_bundle / SCHEMA, lambda d: d["response"]["properties"]["risk_score"].update(minimum=2))
        with pytest.raises(GrammarError, match="exceeds"):
            parse_bundle(fraud_bundle)

    def test_unknown_format(self, fraud_bundle):
        edit_yaml(
            fraud_bundle / SCHEMA,
            lambda d: d["request"]["properties"]["merchant_country"].update(format="iso-4217"),
        )
        with pytest.raises(GrammarError, match="unknown format"):
            parse_bundle(fraud_bundle)

    def test_unknown_property_kind(self, fraud_bundle):
        edit_yaml(fraud_bundle / PROPERTIES, lambda d: d["properties"][0].update(kind="commutative"))
        with pytest.raises(GrammarError, match="/properties/0/kind"):
            parse_bundle(fraud_bundle)

    def test_monotone_needs_numeric_varied_field(self, fraud_bundle):
        edit_yaml(
            fraud_bundle / PROPERTIES,
            lambda d: d["properties"][2]["when"].update(same_fields_except="account_id"),
        )
        with pytest.raises(GrammarError, match="numeric request field"):
            parse_bundle(fraud_bundle)

    def test_monotone_needs_two_requests(self, fraud_bundle):
        edit_yaml(fraud_bundle / PROPERTIES, lambda d: d["properties"][2].update(for_all="r1"))
        with pytest.raises(GrammarError, match="two requests"):
            parse_bundle(fraud_bundle)

    def test_fails_closed_needs_declared_error(self, fraud_bundle):
        edit_yaml(fraud_bundle / PROPERTIES, lambda d: d["properties"][3]["require"].update(error_kind="teapot"))
        with pytest.raises(GrammarError, match="teapot"):
            parse_bundle(fraud_bundle)

    def test_duplicate_property_name(self, fraud_bundle):
        edit_yaml(fraud_bundle / PROPERTIES, lambda d: d["properties"].append(dict(d["properties"][0])))
        with pytest.raises(GrammarError, match="duplicate"):
            parse_bundle(fraud_bundle)

    def test_property_name_colliding_with_clause_id(self, fraud_bundle):
        edit_yaml(fraud_bundle / PROPERTIES, lambda d: d["properties"][0].update(name="network_outbound"))
        with pytest.raises(GrammarError, match="collides"):
            parse_bundle(fraud_bundle)

    def test_allowlist_entry_must_be_host_port(self, fraud_bundle):
        edit_yaml(
            fraud_bundle / CAPABILITIES,
            lambda d: d["capabilities"]["network"]["outbound_allowlist"].append("feature-store.internal"),
        )
        with pytest.raises(GrammarError, match="host:port"):
            parse_bundle(fraud_bundle)

    def test_unknown_resource_bound(self, fraud_bundle):
        edit_yaml(fraud_bundle / CAPABILITIES, lambda d: d["capabilities"]["resources"].update(max_cpu=2))
        with pytest.raises(GrammarError, match="unknown resource bound"):
            parse_bundle(fraud_bundle)

    def test_duplicate_allowlist_entry(self, fraud_bundle):
        edit_yaml(
            fraud_bundle / CAPABILITIES,
            lambda d: d["capabilities"]["dependencies"]["allow"].append("risk-common"),
        )
        with pytest.raises(GrammarError):
            parse_bundle(fraud_bundle)

    def test_bad_dependency_range(self, fraud_bundle):
        edit_yaml(
            fraud_bundle / "protocol.yaml",
            lambda d: d.update(dependencies=[{"protocol_id": "payments", "version_range": "^1.0.0"}]),
        )
        with pytest.raises(GrammarError, match="/dependencies/0/version_range"):
            parse_bundle(fraud_bundle)


class TestEmit:
    def test_emitted_bundle_parses_to_same_documents(self, tmp_path):
        original = parse_bundle(BUNDLES / "fraud-score.protocol")
        emitted = parse_bundle(emit_bundle(original, tmp_path / "copy"))
        assert emitted.documents == original.documents
        assert (tmp_path / "copy" / "evidence").is_dir()
