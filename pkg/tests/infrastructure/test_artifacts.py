import json

import pytest

from pdd.infrastructure.artifacts import load_candidate, path_digest


class TestPathDigest:
    def test_file_digest_tracks_bytes(self, tmp_path):
        f = tmp_path / "a.py"
        f.write_text("print(1)\n")
        first = path_digest(f)
        f.write_text("print(2)\n")
        assert path_digest(f) != first

    def test_directory_digest_ignores_pycache(self, tmp_path):
        (tmp_path / "pkg").mkdir()
        (tmp_path / "pkg" / "m.py").write_text("x = 1\n")
        first = path_digest(tmp_path / "pkg")
        (tmp_path / "pkg" / "__pycache__").mkdir()
        (tmp_path / "pkg" / "__pycache__" / "m.pyc").write_bytes(b"\x00")
        assert path_digest(tmp_path / "pkg") == first


class TestLoadCandidate:
    def test_relative_paths_resolve_against_manifest(self, tmp_path):
        (tmp_path / "svc.py").write_text("pass\n")
        (tmp_path / "gen.txt").write_text("generated\n")
        manifest = tmp_path / "candidate.json"
        manifest.write_text(json.dumps({
            "artifact_id": "fraud-score-py-1.0.0",
            "launch_command": ["python3", "svc.py", "--strategy", "linear"],
            "files": ["gen.txt"],
        }))
        candidate = load_candidate(manifest)
        assert candidate.launch_command == ("python3", str(tmp_path / "svc.py"), "--strategy", "linear")
        assert candidate.artifact_path == str(tmp_path / "svc.py")
        assert candidate.artifact_digest == path_digest(tmp_path / "svc.py")
        assert candidate.files == (str(tmp_path / "gen.txt"),)

    def test_explicit_artifact(self, tmp_path):
        (tmp_path / "build").mkdir()
        (tmp_path / "build" / "app.py").write_text("pass\n")
        manifest = tmp_path / "candidate.json"
        manifest.write_text(json.dumps({
            "artifact_id": "a",
            "launch_command": ["./run"],
            "artifact": "build",
        }))
        assert load_candidate(manifest).artifact_digest == path_digest(tmp_path / "build")

    @pytest.mark.parametrize("body", [{"artifact_id": "a"}, {"artifact_id": "a", "launch_command": []}, "[]"])
    def test_invalid_manifest(self, tmp_path, body):
        manifest = tmp_path / "candidate.json"
        manifest.write_text(body if isinstance(body, str) else json.dumps(body))
        with pytest.raises(ValueError, match="invalid candidate manifest"):
            load_candidate(manifest)
