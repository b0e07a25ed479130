from pathlib import Path

import pytest

from pdd.config import (
    DEFAULT_ISSUER,
    EnforcementPolicy,
    HarnessPolicy,
    Settings,
)


class TestSettings:
    def test_defaults(self):
        settings = Settings.from_env({})
        assert settings.registry == Path("registry")
        assert settings.signing_key is None
        assert settings.trust_map is None
        assert settings.issuer == DEFAULT_ISSUER
        assert settings.log_level == "WARNING"

    def test_reads_pdd_variables(self, tmp_path):
        settings = Settings.from_env({
            "PDD_REGISTRY": str(tmp_path / "reg"),
            "PDD_SIGNING_KEY": str(tmp_path / "k.pem"),
            "PDD_ISSUER": "ci.example",
            "PDD_TRUST_MAP": str(tmp_path / "trust.json"),
            "PDD_LOG_LEVEL": "debug",
            "PDD_RUNS_DB": str(tmp_path / "runs.db"),
        })
        assert settings.registry == tmp_path / "reg"
        assert settings.signing_key == tmp_path / "k.pem"
        assert settings.issuer == "ci.example"
        assert settings.trust_map == tmp_path / "trust.json"
        assert settings.log_level == "DEBUG"
        assert settings.runs_db == tmp_path / "runs.db"

    def test_empty_key_variable_means_unset(self):
        assert Settings.from_env({"PDD_SIGNING_KEY": ""}).signing_key is None


class TestHarnessPolicy:
    def test_unknown_clock_rejected(self):
        with pytest.raises(ValueError, match="clock"):
            HarnessPolicy(clock="lunar")

    def test_non_positive_deadline_rejected(self):
        with pytest.raises(ValueError):
            HarnessPolicy(deadline_ms=0)

    def test_synthetic_flag(self):
        assert HarnessPolicy(clock="synthetic").synthetic
        assert not HarnessPolicy().synthetic


class TestEnforcementPolicy:
    def test_default_actions(self):
        policy = EnforcementPolicy()
        assert policy.action_for("operational_degradation") == "quarantine"
        assert policy.action_for("structural_drift") == "block"
        assert policy.action_for("authority_violation") == "rate_limit"

    def test_unknown_category_uses_fallback(self):
        assert EnforcementPolicy(fallback="rollback").action_for("something_else") == "rollback"

    def test_none_is_not_an_enforcement_action(self):
        with pytest.raises(ValueError):
            EnforcementPolicy(actions={"structural_drift": "none"})
