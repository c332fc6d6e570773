"""
components.database
SQLite-backed store of benchmark episode results.

Table: episodes
- id INTEGER PRIMARY KEY AUTOINCREMENT
- run TEXT (label of the benchmark run the episode belongs to)
- timestamp TEXT (ISO 8601, insertion time)
- controller TEXT, level TEXT, seed INTEGER
- success INTEGER (0/1)
- te REAL, re REAL (terminal errors, meters / degrees)
- ts INTEGER, steps INTEGER, dt REAL
- wall_time REAL
- cause TEXT (failure tag, NULL on success)
- result_json TEXT (raw JSON dump of the episode row)

Usage:
    with Database("out/episodes.sqlite3") as db:
        db.insert_results(report.episodes, run="bench-seed-0", dt=0.04)
        rows = db.aggregate("bench-seed-0")
"""
from __future__ import annotations

import json
import math
import os
import sqlite3
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional

__all__ = ["Database"]


def _ensure_dir_exists(path: str) -> None:
    d = os.path.dirname(path)
    if d and not os.path.exists(d):
        os.makedirs(d, exist_ok=True)


def _finite_or_none(v: Any) -> Optional[float]:
    try:
        if v is None:
            return None
        v = float(v)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


class Database:
    """SQLite store with one row per benchmark episode.

    Aggregates are computed in SQL with the same definitions as the report:
    SR over all runs, TE/RE/TS averaged over successful runs, mTT = mean steps * dt.

    The DB file defaults to components/database.sqlite3 next to this file.
    """

    def __init__(self, db_path: Optional[str] = None, timeout: float = 5.0) -> None:
        if db_path is None:
            base = os.path.dirname(__file__)
            db_path = os.path.join(base, "database.sqlite3")

        _ensure_dir_exists(db_path)
        self.db_path = os.path.abspath(db_path)
        self.timeout = timeout
        self.conn: Optional[sqlite3.Connection] = None
        self._connect()

    def _connect(self) -> None:
        self.conn = sqlite3.connect(self.db_path, timeout=self.timeout)
        self.conn.row_factory = sqlite3.Row
        self._create_table()

    def _create_table(self) -> None:
        assert self.conn is not None
        cur = self.conn.cursor()
        cur.execute(
            """
            CREATE TABLE IF NOT EXISTS episodes
            (
                id          INTEGER PRIMARY KEY AUTOINCREMENT,
                run         TEXT NOT NULL,
                timestamp   TEXT NOT NULL,
                controller  TEXT NOT NULL,
                level       TEXT NOT NULL,
                seed        INTEGER NOT NULL,
                success     INTEGER NOT NULL,
                te          REAL,
                re          REAL,
                ts          INTEGER,
                steps       INTEGER,
                dt          REAL,
                wall_time   REAL,
                cause       TEXT,
                result_json TEXT
            )
            """
        )
        cur.execute("CREATE INDEX IF NOT EXISTS idx_episodes_run ON episodes(run)")
        cur.execute("CREATE INDEX IF NOT EXISTS idx_episodes_controller ON episodes(run, controller, level)")
        self.conn.commit()

    def insert_results(self, results: Iterable[Any], run: str, dt: float,
                       timestamp: Optional[datetime] = None) -> int:
        """Wstawia obiekty EpisodeResult (cokolwiek z ``to_row()``) lub zwykłe słowniki; zwraca liczbę wierszy."""
        if timestamp is None:
            timestamp = datetime.now(timezone.utc)
        stamp = timestamp.isoformat(sep=" ")
        records = []
        for result in results:
            row: Dict[str, Any] = result.to_row() if hasattr(result, "to_row") else dict(result)
            records.append((
                run, stamp, row["controller"], row["level"], int(row["seed"]), int(bool(row["success"])),
                _finite_or_none(row.get("te")), _finite_or_none(row.get("re")),
                int(row["ts"]), int(row["steps"]), float(dt), _finite_or_none(row.get("wall_time")),
                row.get("cause"), json.dumps(row, default=str, sort_keys=True),
            ))
        assert self.conn is not None
        self.conn.executemany(
            """
            INSERT INTO episodes (run, timestamp, controller, level, seed, success, te, re,
                                  ts, steps, dt, wall_time, cause, result_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            records,
        )
        self.conn.commit()
        return len(records)

    def fetch_run(self, run: str) -> List[Dict[str, Any]]:
        assert self.conn is not None
        cur = self.conn.cursor()
        cur.execute("SELECT * FROM episodes WHERE run = ? ORDER BY controller, level, seed", (run,))
        result = []
        for r in cur.fetchall():
            d = dict(r)
            try:
                d["result"] = json.loads(d.get("result_json") or "null")
            except ValueError:
                d["result"] = None
            result.append(d)
        return result

    def runs(self) -> List[str]:
        assert self.conn is not None
        cur = self.conn.cursor()
        cur.execute("SELECT run FROM episodes GROUP BY run ORDER BY MIN(id)")
        return [r[0] for r in cur.fetchall()]

    def aggregate(self, run: str) -> List[Dict[str, Any]]:
        """Per (controller, level) rows with the report's column names; means without successes are nan."""
        assert self.conn is not None
        cur = self.conn.cursor()
        cur.execute(
            """
            SELECT controller, level,
                   COUNT(*) AS runs,
                   SUM(success) AS successes,
                   100.0 * SUM(success) / COUNT(*) AS sr,
                   AVG(CASE WHEN success = 1 THEN te END) AS te,
                   AVG(CASE WHEN success = 1 THEN re END) AS re,
                   AVG(CASE WHEN success = 1 THEN ts END) AS ts,
                   AVG(steps * dt) AS mtt
            FROM episodes
            WHERE run = ?
            GROUP BY controller, level
            ORDER BY MIN(id)
            """,
            (run,),
        )
        out = []
        for r in cur.fetchall():
            d = dict(r)
            for key in ("te", "re", "ts"):
                if d[key] is None:
                    d[key] = float("nan")
            out.append(d)
        return out

    def count(self, run: Optional[str] = None) -> int:
        assert self.conn is not None
        cur = self.conn.cursor()
        if run is None:
            cur.execute("SELECT COUNT(*) FROM episodes")
        else:
            cur.execute("SELECT COUNT(*) FROM episodes WHERE run = ?", (run,))
        return int(cur.fetchone()[0])

    def delete_run(self, run: str) -> int:
        assert self.conn is not None
        cur = self.conn.cursor()
        cur.execute("DELETE FROM episodes WHERE run = ?", (run,))
        self.conn.commit()
        return cur.rowcount

    def close(self) -> None:
        if self.conn:
            try:
                self.conn.commit()
            except sqlite3.Error:
                pass
            try:
                self.conn.close()
            except sqlite3.Error:
                pass
            self.conn = None

    def __enter__(self) -> "Database":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
