"""Durable job store and content-addressed artifact store.

Jobs and their event logs live in one sqlite database; uploaded images,
masks, and results are hash-named files next to it. Everything survives a
service restart: queued jobs are picked up again, jobs that were mid-flight
are failed cleanly (they never vanish).
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from .errors import MaskEditError

# monotonic lifecycle; Denoising carries a nondecreasing step counter
JOB_STATES = ("queued", "inverting", "denoising", "decoding", "done", "failed")
_TERMINAL = ("done", "failed")


class StoreError(MaskEditError):
    pass


@dataclass(frozen=True)
class JobRow:
    job_id: str
    state: str
    step: int
    total_steps: int
    reason: str | None
    request: dict
    created: float
    updated: float
    result_id: str | None
    priority: int

    def to_json(self) -> dict:
        payload = {
            "job_id": self.job_id,
            "state": self.state,
            "created": self.created,
            "updated": self.updated,
            "priority": self.priority,
            "request": self.request,
        }
        if self.state == "denoising":
            payload["step"] = self.step
            payload["total_steps"] = self.total_steps
        if self.state == "failed":
            payload["reason"] = self.reason
        if self.result_id:
            payload["result_id"] = self.result_id
        return payload


class ArtifactStore:
    """Hash-named files plus a small metadata table; uploads deduplicate."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.root / "artifacts.sqlite3", check_same_thread=False)
        with self._lock:
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS artifacts ("
                "id TEXT PRIMARY KEY, kind TEXT NOT NULL, ext TEXT NOT NULL, created REAL NOT NULL)"
            )
            self._db.commit()

    def put(self, data: bytes, kind: str, ext: str = "png") -> str:
        artifact_id = hashlib.sha256(data).hexdigest()
        path = self.root / "objects" / f"{artifact_id}.{ext}"
        if not path.exists():
            path.write_bytes(data)
        with self._lock:
            self._db.execute(
                "INSERT OR IGNORE INTO artifacts (id, kind, ext, created) VALUES (?, ?, ?, ?)",
                (artifact_id, kind, ext, time.time()),
            )
            self._db.commit()
        return artifact_id

    def get_path(self, artifact_id: str) -> Path | None:
        with self._lock:
            row = self._db.execute(
                "SELECT ext FROM artifacts WHERE id = ?", (artifact_id,)
            ).fetchone()
        if row is None:
            return None
        path = self.root / "objects" / f"{artifact_id}.{row[0]}"
        return path if path.exists() else None

    def get_bytes(self, artifact_id: str) -> bytes | None:
        path = self.get_path(artifact_id)
        return path.read_bytes() if path else None


class JobStore:
    """Sqlite-backed job table with an append-only per-job event log."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.root / "jobs.sqlite3", check_same_thread=False)
        with self._lock:
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS jobs ("
                "job_id TEXT PRIMARY KEY, state TEXT NOT NULL, step INTEGER NOT NULL DEFAULT 0,"
                "total_steps INTEGER NOT NULL DEFAULT 0, reason TEXT, request TEXT NOT NULL,"
                "created REAL NOT NULL, updated REAL NOT NULL, result_id TEXT,"
                "priority INTEGER NOT NULL DEFAULT 0, seq INTEGER)"
            )
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS job_events ("
                "job_id TEXT NOT NULL, seq INTEGER NOT NULL, name TEXT NOT NULL,"
                "payload TEXT NOT NULL, created REAL NOT NULL, PRIMARY KEY (job_id, seq))"
            )
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS counters (name TEXT PRIMARY KEY, value INTEGER NOT NULL)"
            )
            self._db.commit()

    def _next_seq(self) -> int:
        self._db.execute(
            "INSERT INTO counters (name, value) VALUES ('job_seq', 1) "
            "ON CONFLICT(name) DO UPDATE SET value = value + 1"
        )
        return self._db.execute("SELECT value FROM counters WHERE name = 'job_seq'").fetchone()[0]

    def create(self, request: dict, total_steps: int, priority: int = 0) -> str:
        job_id = uuid.uuid4().hex[:16]
        now = time.time()
        with self._lock:
            seq = self._next_seq()
            self._db.execute(
                "INSERT INTO jobs (job_id, state, step, total_steps, reason, request, created,"
                " updated, result_id, priority, seq) VALUES (?, 'queued', 0, ?, NULL, ?, ?, ?, NULL, ?, ?)",
                (job_id, total_steps, json.dumps(request), now, now, priority, seq),
            )
            self._append_event(job_id, "queued", {})
            self._db.commit()
        return job_id

    def get(self, job_id: str) -> JobRow | None:
        with self._lock:
            row = self._db.execute(
                "SELECT job_id, state, step, total_steps, reason, request, created, updated,"
                " result_id, priority FROM jobs WHERE job_id = ?",
                (job_id,),
            ).fetchone()
        if row is None:
            return None
        return JobRow(
            job_id=row[0], state=row[1], step=row[2], total_steps=row[3], reason=row[4],
            request=json.loads(row[5]), created=row[6], updated=row[7], result_id=row[8],
            priority=row[9],
        )

    def _validate_transition(self, current: str, step: int, new_state: str, new_step: int):
        order = {name: i for i, name in enumerate(JOB_STATES)}
        if new_state not in order:
            raise StoreError(f"unknown state {new_state!r}")
        if current in _TERMINAL:
            raise StoreError(f"job already terminal ({current})")
        if new_state == "failed":
            return
        if order[new_state] < order[current]:
            raise StoreError(f"state may not move backward: {current} -> {new_state}")
        if new_state == "denoising" and current == "denoising" and new_step < step:
            raise StoreError(f"denoising step may not decrease: {step} -> {new_step}")

    def set_state(
        self, job_id: str, state: str, step: int = 0, reason: str | None = None,
        result_id: str | None = None, emit_event: bool = True,
    ) -> None:
        with self._lock:
            row = self._db.execute(
                "SELECT state, step FROM jobs WHERE job_id = ?", (job_id,)
            ).fetchone()
            if row is None:
                raise StoreError(f"unknown job {job_id}")
            self._validate_transition(row[0], row[1], state, step)
            self._db.execute(
                "UPDATE jobs SET state = ?, step = ?, reason = ?, updated = ?,"
                " result_id = COALESCE(?, result_id) WHERE job_id = ?",
                (state, step, reason, time.time(), result_id, job_id),
            )
            if emit_event:
                payload: dict = {}
                if state == "denoising":
                    total = self._db.execute(
                        "SELECT total_steps FROM jobs WHERE job_id = ?", (job_id,)
                    ).fetchone()[0]
                    payload = {"step": step, "total": total}
                if state == "failed":
                    payload = {"reason": reason}
                self._append_event(job_id, state, payload)
            self._db.commit()

    def claim_next_queued(self) -> JobRow | None:
        """Atomically move the front of the queue (priority, then FIFO) to 'inverting'."""
        with self._lock:
            row = self._db.execute(
                "SELECT job_id FROM jobs WHERE state = 'queued' ORDER BY priority, seq LIMIT 1"
            ).fetchone()
            if row is None:
                return None
            job_id = row[0]
            self._db.execute(
                "UPDATE jobs SET state = 'inverting', updated = ? WHERE job_id = ? AND state = 'queued'",
                (time.time(), job_id),
            )
            self._append_event(job_id, "inverting", {})
            self._db.commit()
        return self.get(job_id)

    def active_count(self) -> int:
        with self._lock:
            return self._db.execute(
                "SELECT COUNT(*) FROM jobs WHERE state NOT IN ('done', 'failed')"
            ).fetchone()[0]

    def recover(self) -> None:
        """Startup recovery: queued jobs stay queued, mid-flight jobs fail cleanly."""
        with self._lock:
            rows = self._db.execute(
                "SELECT job_id FROM jobs WHERE state IN ('inverting', 'denoising', 'decoding')"
            ).fetchall()
            for (job_id,) in rows:
                self._db.execute(
                    "UPDATE jobs SET state = 'failed', reason = ?, updated = ? WHERE job_id = ?",
                    ("interrupted by service restart", time.time(), job_id),
                )
                self._append_event(job_id, "failed", {"reason": "interrupted by service restart"})
            self._db.commit()

    # -------------------------------------------------------------- events

    def _append_event(self, job_id: str, name: str, payload: dict) -> None:
        last = self._db.execute(
            "SELECT COALESCE(MAX(seq), 0) FROM job_events WHERE job_id = ?", (job_id,)
        ).fetchone()[0]
        self._db.execute(
            "INSERT INTO job_events (job_id, seq, name, payload, created) VALUES (?, ?, ?, ?, ?)",
            (job_id, last + 1, name, json.dumps(payload), time.time()),
        )

    def events_after(self, job_id: str, after_seq: int = 0) -> list[tuple[int, str, dict]]:
        with self._lock:
            rows = self._db.execute(
                "SELECT seq, name, payload FROM job_events WHERE job_id = ? AND seq > ? ORDER BY seq",
                (job_id, after_seq),
            ).fetchall()
        return [(seq, name, json.loads(payload)) for seq, name, payload in rows]
