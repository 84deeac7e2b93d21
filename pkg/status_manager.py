"""
CCMForge Status Manager

Atomic per-stage state for a pipeline output directory. Each stage keeps
an independent status file in <out>/.status/<stage>.json holding the hash
of its inputs, its parameters and the hash of what it produced, so reruns
can skip stages whose inputs are unchanged.
"""

from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path
from typing import Optional

from config import STATUS_DIRNAME
from utils_fs import atomic_write_json, file_lock
from utils_log import get_logger

logger = get_logger("status")

STAGES = ("gen", "calibrate", "solve", "train", "infer", "eval", "bench")


class RunStatusManager:
    """
    Manages independent status files for each pipeline stage.

    Status files live in <out_dir>/.status/ and are excluded from dataset
    and artifact hashes.
    """

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.status_dir = self.out_dir / STATUS_DIRNAME

    def _path(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        return self.status_dir / f"{stage}.json"

    def _read_status(self, file_path: Path) -> dict:
        try:
            return json.loads(file_path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return {}

    def _write_status(self, file_path: Path, data: dict) -> None:
        try:
            atomic_write_json(file_path, data)
        except OSError as e:
            print(f"[WARN] Failed to write status to {file_path}: {e}")

    def get_stage_status(self, stage: str) -> dict:
        return self._read_status(self._path(stage))

    def set_stage_status(
        self,
        stage: str,
        *,
        input_hash: str,
        params: dict,
        output_hash: Optional[str] = None,
        state: str = "done",
        **metadata,
    ) -> None:
        path = self._path(stage)
        lock_path = path.with_suffix(path.suffix + ".lock")
        with file_lock(lock_path):
            data = {
                "state": state,
                "input_hash": input_hash,
                "params": params,
                "output_hash": output_hash,
                "updated_at": datetime.now().isoformat(timespec="seconds"),
            }
            data.update(metadata)
            self._write_status(path, data)

    def mark_failed(self, stage: str, *, input_hash: str, params: dict, error: str) -> None:
        self.set_stage_status(stage, input_hash=input_hash, params=params, state="error", error=error)

    def is_up_to_date(self, stage: str, input_hash: str, params: dict) -> bool:
        """True when the stage last finished with the same inputs and parameters."""
        status = self.get_stage_status(stage)
        # Compare in stored JSON form: tuples come back as lists
        params = json.loads(json.dumps(params, sort_keys=True))
        fresh = (
            status.get("state") == "done"
            and status.get("input_hash") == input_hash
            and status.get("params") == params
        )
        if fresh:
            logger.info(f"Stage {stage} up to date (input {input_hash[:12]})")
        return fresh
