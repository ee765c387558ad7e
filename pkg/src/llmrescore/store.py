from __future__ import annotations

import sqlite3


class RawStore:
    """SQLite audit trail of raw LLM payloads, one row per attempt."""

    def __init__(self, db_path: str = ":memory:") -> None:
        self._conn = sqlite3.connect(db_path)
        self._conn.row_factory = sqlite3.Row
        self._run_id = "default"
        self._create_tables()

    def _create_tables(self) -> None:
        self._conn.executescript("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                started_at TEXT DEFAULT (datetime('now'))
            );

            CREATE TABLE IF NOT EXISTS raw_responses (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                request_tag TEXT NOT NULL,
                attempt INTEGER NOT NULL,
                finish_reason TEXT NOT NULL,
                payload BLOB,
                error TEXT,
                recorded_at TEXT DEFAULT (datetime('now'))
            );

            CREATE INDEX IF NOT EXISTS idx_raw_run_tag
                ON raw_responses(run_id, request_tag);
        """)

    # ── runs ─────────────────────────────────────────────────────

    def start_run(self, run_id: str) -> None:
        self._conn.execute("INSERT OR IGNORE INTO runs (run_id) VALUES (?)", (run_id,))
        self._conn.commit()
        self._run_id = run_id

    def use_run(self, run_id: str) -> None:
        """Read an existing run without registering a new one."""
        self._run_id = run_id

    @property
    def run_id(self) -> str:
        return self._run_id

    # ── raw_responses ────────────────────────────────────────────

    def record_response(
        self, request_tag: str, attempt: int, finish_reason: str, payload: bytes
    ) -> None:
        self._conn.execute(
            "INSERT INTO raw_responses (run_id, request_tag, attempt, finish_reason, payload) "
            "VALUES (?, ?, ?, ?, ?)",
            (self.run_id, request_tag, attempt, finish_reason, payload),
        )
        self._conn.commit()

    def record_failure(self, request_tag: str, attempt: int, error: str) -> None:
        self._conn.execute(
            "INSERT INTO raw_responses (run_id, request_tag, attempt, finish_reason, error) "
            "VALUES (?, ?, ?, 'error', ?)",
            (self.run_id, request_tag, attempt, error),
        )
        self._conn.commit()

    def responses(self, request_tag: str) -> list[dict]:
        rows = self._conn.execute(
            """
            SELECT attempt, finish_reason, payload, error
            FROM raw_responses
            WHERE run_id = ? AND request_tag = ?
            ORDER BY attempt
            """,
            (self.run_id, request_tag),
        ).fetchall()
        return [
            {
                "attempt": row["attempt"],
                "finish_reason": row["finish_reason"],
                "payload": row["payload"],
                "error": row["error"],
            }
            for row in rows
        ]

    def count(self) -> int:
        row = self._conn.execute(
            "SELECT COUNT(*) FROM raw_responses WHERE run_id = ?", (self.run_id,)
        ).fetchone()
        return row[0]

    def close(self) -> None:
        self._conn.close()
