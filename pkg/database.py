import aiosqlite
import json
import logging
import math
import os
from datetime import datetime, timezone
from typing import Any, List, Optional


logger = logging.getLogger(__name__)


def _num(value: float) -> Optional[float]:
    # SQLite не хранит NaN; пустое значение пишется как NULL.
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


class Database:
    """Реестр запусков поверх SQLite с асинхронными методами."""

    def __init__(self, path: str):
        self.path = path

    async def init(self) -> None:
        """Создание таблиц при старте."""
        # Если указан путь с директорией (например runs/registry.sqlite3),
        # создаём директорию заранее.
        if self.path and self.path != ":memory:":
            parent_dir = os.path.dirname(self.path)
            if parent_dir:
                os.makedirs(parent_dir, exist_ok=True)

        async with aiosqlite.connect(self.path) as db:
            await db.execute(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    scenario TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    config_json TEXT NOT NULL,
                    output_dir TEXT,
                    status TEXT NOT NULL DEFAULT 'running',
                    message TEXT,
                    created_at TEXT NOT NULL,
                    finished_at TEXT
                )
                """
            )
            await db.execute(
                """
                CREATE TABLE IF NOT EXISTS rounds (
                    run_id TEXT NOT NULL,
                    round INTEGER NOT NULL,
                    train_loss REAL,
                    test_acc REAL,
                    bits_per_entry REAL,
                    mean_block_nmse REAL,
                    mean_bound REAL,
                    wall_time_ms REAL,
                    delta REAL,
                    feedback_violations INTEGER NOT NULL DEFAULT 0,
                    PRIMARY KEY (run_id, round),
                    FOREIGN KEY (run_id) REFERENCES runs(run_id)
                )
                """
            )
            await db.commit()

    async def create_run(
        self, run_id: str, scenario: str, seed: int, config_echo: dict[str, Any], output_dir: str
    ) -> None:
        """Зарегистрировать новый запуск (повторный id перезаписывает запись)."""
        created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        async with aiosqlite.connect(self.path) as db:
            await db.execute("DELETE FROM rounds WHERE run_id = ?", (run_id,))
            await db.execute(
                """
                INSERT OR REPLACE INTO runs (run_id, scenario, seed, config_json, output_dir, status, created_at)
                VALUES (?, ?, ?, ?, ?, 'running', ?)
                """,
                (run_id, scenario, seed, json.dumps(config_echo, sort_keys=True), output_dir, created_at),
            )
            await db.commit()
        logger.debug("[REGISTRY] run %s registered", run_id)

    async def add_round(self, run_id: str, metrics) -> None:
        """Сохранить метрики одного раунда."""
        async with aiosqlite.connect(self.path) as db:
            await db.execute(
                """
                INSERT OR REPLACE INTO rounds (
                    run_id, round, train_loss, test_acc, bits_per_entry,
                    mean_block_nmse, mean_bound, wall_time_ms, delta, feedback_violations
                )
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                (
                    run_id,
                    metrics.round,
                    _num(metrics.train_loss),
                    _num(metrics.test_acc),
                    _num(metrics.bits_per_entry),
                    _num(metrics.mean_block_nmse),
                    _num(metrics.mean_bound),
                    _num(metrics.wall_time_ms),
                    _num(metrics.delta),
                    metrics.feedback_violations,
                ),
            )
            await db.commit()

    async def finish_run(self, run_id: str, status: str, message: Optional[str] = None) -> None:
        finished_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        async with aiosqlite.connect(self.path) as db:
            await db.execute(
                "UPDATE runs SET status = ?, message = ?, finished_at = ? WHERE run_id = ?",
                (status, message, finished_at, run_id),
            )
            await db.commit()
        logger.debug("[REGISTRY] run %s finished: %s", run_id, status)

    async def get_run(self, run_id: str) -> Optional[aiosqlite.Row]:
        async with aiosqlite.connect(self.path) as db:
            db.row_factory = aiosqlite.Row
            cur = await db.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
            return await cur.fetchone()

    async def get_rounds(self, run_id: str) -> List[aiosqlite.Row]:
        """Раунды запуска по возрастанию номера."""
        async with aiosqlite.connect(self.path) as db:
            db.row_factory = aiosqlite.Row
            cur = await db.execute(
                "SELECT * FROM rounds WHERE run_id = ? ORDER BY round",
                (run_id,),
            )
            return list(await cur.fetchall())

    async def list_runs(self, limit: int = 20) -> List[aiosqlite.Row]:
        async with aiosqlite.connect(self.path) as db:
            db.row_factory = aiosqlite.Row
            cur = await db.execute(
                "SELECT * FROM runs ORDER BY created_at DESC, run_id LIMIT ?",
                (limit,),
            )
            return list(await cur.fetchall())


class NullRegistry:
    """Реестр-заглушка для FEDVQCS_REGISTRY=none: ничего не сохраняет."""

    async def init(self) -> None:
        return None

    async def create_run(self, run_id, scenario, seed, config_echo, output_dir) -> None:
        return None

    async def add_round(self, run_id, metrics) -> None:
        return None

    async def finish_run(self, run_id, status, message=None) -> None:
        return None
