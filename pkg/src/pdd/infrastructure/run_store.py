from __future__ import annotations

import json
import logging
from datetime import timezone
from pathlib import Path

import duckdb

from pdd.domain.models import CandidateRef, SealedBundle, ValidationRun
from pdd.domain.ports import Clock
from pdd.infrastructure.clock import SystemClock

logger = logging.getLogger(__name__)

_DEFAULT_DB_PATH = Path.home() / ".pdd" / "runs.db"


class RunStore:
    """Persists admission runs to DuckDB for history and audit queries."""

    def __init__(self, db_path: str | Path | None = None, clock: Clock | None = None) -> None:
        self._clock = clock or SystemClock()
        self._db_path = _DEFAULT_DB_PATH if db_path is None else Path(db_path)
        self._db_path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = duckdb.connect(str(self._db_path))
        self._ensure_tables()

    def _ensure_tables(self) -> None:
        self._conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id          VARCHAR PRIMARY KEY,
                created_at      TIMESTAMP NOT NULL,
                protocol_id     VARCHAR NOT NULL,
                version         VARCHAR NOT NULL,
                bundle_digest   VARCHAR NOT NULL,
                artifact_id     VARCHAR NOT NULL,
                artifact_digest VARCHAR NOT NULL,
                seed            BIGINT NOT NULL,
                case_count      INTEGER NOT NULL,
                admitted        BOOLEAN NOT NULL,
                invocations     INTEGER NOT NULL,
                outcome_id      VARCHAR NOT NULL
            )
        """)
        self._conn.execute("""
            CREATE TABLE IF NOT EXISTS validator_results (
                run_id    VARCHAR NOT NULL,
                validator VARCHAR NOT NULL,
                version   VARCHAR NOT NULL,
                result    VARCHAR NOT NULL,
                metrics   VARCHAR NOT NULL,
                PRIMARY KEY (run_id, validator)
            )
        """)
        self._conn.execute("""
            CREATE TABLE IF NOT EXISTS clause_outcomes (
                run_id         VARCHAR NOT NULL,
                validator      VARCHAR NOT NULL,
                clause_id      VARCHAR NOT NULL,
                passed         BOOLEAN NOT NULL,
                observed_value DOUBLE,
                allowed_value  DOUBLE,
                detail         VARCHAR NOT NULL,
                PRIMARY KEY (run_id, validator, clause_id)
            )
        """)

    def _insert_rows(self, table: str, run_id: str, records, fields_fn) -> None:
        for rec in records:
            fields = fields_fn(rec)
            placeholders = ", ".join(["?"] * (1 + len(fields)))
            self._conn.execute(
                f"INSERT INTO {table} VALUES ({placeholders})",  # noqa: S608
                [run_id] + fields,
            )

    def save_run(
        self,
        run_id: str,
        sealed: SealedBundle,
        candidate: CandidateRef,
        seed: int,
        case_count: int,
        run: ValidationRun,
        outcome_id: str,
    ) -> None:
        """Persist one admission attempt in a single transaction."""
        # Stored as naive UTC.
        now = self._clock.now().astimezone(timezone.utc).replace(tzinfo=None)
        self._conn.begin()
        try:
            self._conn.execute(
                "INSERT INTO runs VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                [
                    run_id,
                    now,
                    sealed.protocol_id,
                    sealed.version,
                    sealed.bundle_digest,
                    candidate.artifact_id,
                    candidate.artifact_digest,
                    seed,
                    case_count,
                    run.admitted,
                    len(run.trace.invocations),
                    outcome_id,
                ],
            )
            self._insert_rows("validator_results", run_id, run.results, lambda r: [
                r.name, r.version, r.result, json.dumps(r.metrics, sort_keys=True)])
            # One row per clause of every validator result
            self._insert_rows("clause_outcomes", run_id,
                [(r.name, c) for r in run.results for c in r.clauses], lambda rc: [
                rc[0], rc[1].clause_id, rc[1].passed,
                rc[1].observed_value, rc[1].allowed_value, rc[1].detail])
            self._conn.commit()
        except Exception:
            self._conn.rollback()
            raise
        logger.info("Recorded run %s (%s)", run_id, "admitted" if run.admitted else "rejected")

    def list_runs(self, protocol_id: str | None = None) -> list[dict]:
        query = """SELECT run_id, created_at, protocol_id, version, artifact_id,
                          admitted, outcome_id
                   FROM runs"""
        params: list = []
        if protocol_id is not None:
            query += " WHERE protocol_id = ?"
            params.append(protocol_id)
        result = self._conn.execute(query + " ORDER BY created_at DESC", params).fetchall()
        columns = ["run_id", "created_at", "protocol_id", "version", "artifact_id", "admitted", "outcome_id"]
        return [dict(zip(columns, row)) for row in result]

    def _query_child(self, table: str, run_id: str) -> list[dict]:
        result = self._conn.execute(
            f"SELECT * FROM {table} WHERE run_id = ?", [run_id]  # noqa: S608
        ).fetchall()
        if not result:
            return []
        cols = [desc[0] for desc in self._conn.description]
        return [dict(zip(cols, row)) for row in result]

    def get_validator_results(self, run_id: str) -> list[dict]:
        rows = self._query_child("validator_results", run_id)
        for row in rows:
            row["metrics"] = json.loads(row["metrics"])
        return rows

    def get_clause_outcomes(self, run_id: str) -> list[dict]:
        return self._query_child("clause_outcomes", run_id)

    def close(self) -> None:
        self._conn.close()
