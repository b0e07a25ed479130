import pytest

from pdd.domain.models import SchemaNode
from pdd.infrastructure.schema_engine import validate_document

REQUEST = SchemaNode(
    kind="object",
    required=("transaction_id", "amount_cents"),
    properties={
        "transaction_id": SchemaNode("string"),
        "amount_cents": SchemaNode("integer", minimum=0),
        "merchant_country": SchemaNode("string", pattern="^[A-Z]{2}$"),
        "channel": SchemaNode("enum", enum_values=("web", "pos")),
        "ratio": SchemaNode("number", maximum=1.0),
    },
)


def _paths(value):
    return [v.path for v in validate_document(REQUEST, value)]


class TestValidateDocument:
    def test_conformant(self):
        assert _paths({"transaction_id": "t1", "amount_cents": 5, "merchant_country": "DE"}) == []

    def test_missing_required(self):
        assert _paths({"amount_cents": 5}) == ["/transaction_id"]

    def test_extra_fields_are_allowed(self):
        assert _paths({"transaction_id": "t", "amount_cents": 1, "note": "x"}) == []

    def test_below_minimum_reports_bound(self):
        (violation,) = validate_document(REQUEST, {"transaction_id": "t", "amount_cents": -3})
        assert violation.path == "/amount_cents"
        assert (violation.observed, violation.allowed) == (-3, 0)

    def test_bool_is_not_an_integer(self):
        assert _paths({"transaction_id": "t", "amount_cents": True}) == ["/amount_cents"]

    def test_float_is_not_an_integer(self):
        assert _paths({"transaction_id": "t", "amount_cents": 1.5}) == ["/amount_cents"]

    def test_pattern(self):
        assert _paths({"transaction_id": "t", "amount_cents": 1, "merchant_country": "deu"}) == ["/merchant_country"]

    def test_enum_is_type_strict(self):
        assert _paths({"transaction_id": "t", "amount_cents": 1, "channel": "kiosk"}) == ["/channel"]

    def test_number_above_maximum(self):
        assert _paths({"transaction_id": "t", "amount_cents": 1, "ratio": 1.5}) == ["/ratio"]

    @pytest.mark.parametrize("value", [None, [], "body"])
    def test_non_object_root(self, value):
        assert _paths(value) == ["/"]

    def test_prefix_applied(self):
        (violation,) = validate_document(REQUEST, {"amount_cents": 1}, "/request")
        assert violation.path == "/request/transaction_id"
