import base64
import json
import string

import pytest

from pdd.domain.errors import SigningFailure
from pdd.infrastructure.signing import (
    Ed25519Signer,
    load_trust_map,
    verify_signature,
    write_key_pair,
)


class TestSignatures:
    def test_sign_and_verify(self, signer):
        signature = signer.sign(b"payload")
        assert signature.startswith("sig:")
        assert verify_signature(signer.public_key_b64(), b"payload", signature)

    def test_other_payload_fails(self, signer):
        assert not verify_signature(signer.public_key_b64(), b"other", signer.sign(b"payload"))

    def test_other_key_fails(self, signer):
        other = Ed25519Signer.generate("someone-else")
        assert not verify_signature(other.public_key_b64(), b"payload", signer.sign(b"payload"))

    def test_missing_prefix_fails(self, signer):
        signature = signer.sign(b"payload").removeprefix("sig:")
        assert not verify_signature(signer.public_key_b64(), b"payload", signature)

    def test_garbage_signature_fails(self, signer):
        assert not verify_signature(signer.public_key_b64(), b"payload", "sig:not-base64!")

    def test_padding_bits_must_be_zero(self, signer):
        signature = signer.sign(b"payload")
        assert signature.endswith("==")
        alphabet = string.ascii_uppercase + string.ascii_lowercase + string.digits + "+/"
        last = signature[-3]
        # Same decoded bytes, different text.
        variant = signature[:-3] + alphabet[alphabet.index(last) ^ 1] + "=="
        assert base64.b64decode(variant[4:]) == base64.b64decode(signature[4:])
        assert not verify_signature(signer.public_key_b64(), b"payload", variant)


class TestKeyFiles:
    def test_round_trip_through_pem(self, tmp_path, signer):
        key_path, trust_path = write_key_pair(signer, tmp_path)
        loaded = Ed25519Signer.from_pem(key_path, signer.issuer)
        assert loaded.public_key_b64() == signer.public_key_b64()
        assert load_trust_map(trust_path) == {signer.issuer: signer.public_key_b64()}
        assert key_path.stat().st_mode & 0o777 == 0o600

    def test_trust_map_is_merged(self, tmp_path, signer):
        trust = tmp_path / "trust.json"
        trust.write_text(json.dumps({"ci.example": "AAAA"}))
        write_key_pair(signer, tmp_path / "keys", trust)
        assert set(load_trust_map(trust)) == {"ci.example", signer.issuer}

    def test_missing_trust_map_is_empty(self, tmp_path):
        assert load_trust_map(tmp_path / "absent.json") == {}
        assert load_trust_map(None) == {}

    def test_malformed_trust_map(self, tmp_path):
        bad = tmp_path / "trust.json"
        bad.write_text(json.dumps({"issuer": 5}))
        with pytest.raises(ValueError):
            load_trust_map(bad)

    def test_unreadable_key(self, tmp_path):
        bad = tmp_path / "key.pem"
        bad.write_text("not a key")
        with pytest.raises(SigningFailure):
            Ed25519Signer.from_pem(bad, "x")
