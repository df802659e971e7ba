import os
import sqlite3
import threading
from typing import List, Optional

from models.pipeline_models import StageReceipt


class ReceiptStorage:
    """阶段回执存储（SQLite）"""

    def __init__(self, db_path: str = "work/receipts.db"):
        self.db_path = db_path
        directory = os.path.dirname(self.db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._init_db()

    def _init_db(self):
        with self._lock, self._conn:
            self._conn.execute(
                """
                CREATE TABLE IF NOT EXISTS stage_receipts (
                    stage TEXT PRIMARY KEY,
                    inputs_hash TEXT NOT NULL,
                    outputs_hash TEXT NOT NULL,
                    wall_time REAL,
                    finished_at TEXT,
                    outputs TEXT
                )
                """
            )

    def get(self, stage: str) -> Optional[StageReceipt]:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM stage_receipts WHERE stage = ?", (stage,)
            ).fetchone()
        if row is None:
            return None
        outputs = row["outputs"].split("\n") if row["outputs"] else []
        return StageReceipt(
            stage=row["stage"],
            inputs_hash=row["inputs_hash"],
            outputs_hash=row["outputs_hash"],
            wall_time=row["wall_time"] or 0.0,
            finished_at=row["finished_at"] or "",
            outputs=outputs,
        )

    def put(self, receipt: StageReceipt):
        with self._lock, self._conn:
            self._conn.execute(
                """
                INSERT INTO stage_receipts (stage, inputs_hash, outputs_hash, wall_time, finished_at, outputs)
                VALUES (?, ?, ?, ?, ?, ?)
                ON CONFLICT(stage) DO UPDATE SET
                    inputs_hash = excluded.inputs_hash,
                    outputs_hash = excluded.outputs_hash,
                    wall_time = excluded.wall_time,
                    finished_at = excluded.finished_at,
                    outputs = excluded.outputs
                """,
                (
                    receipt.stage,
                    receipt.inputs_hash,
                    receipt.outputs_hash,
                    receipt.wall_time,
                    receipt.finished_at,
                    "\n".join(receipt.outputs),
                ),
            )

    def list_receipts(self) -> List[StageReceipt]:
        with self._lock:
            stages = [row["stage"] for row in self._conn.execute("SELECT stage FROM stage_receipts ORDER BY stage")]
        return [self.get(stage) for stage in stages]

    def close(self):
        with self._lock:
            self._conn.close()
