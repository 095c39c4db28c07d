"""
Run Context - atomic persistence of run metadata (run.json).

Holds the run id, command, lifecycle state with its history, the config
snapshot, artifact paths and the final summary. Every mutation is written
through a temporary file and an atomic rename.
"""

import json
import os
import tempfile
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

RUN_CONTEXT_VERSION = 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunContext:
    """
    Type-safe access to ``<out_dir>/run.json``.

    Loading an existing file migrates it to the current layout; otherwise a
    fresh context is created in memory and written on the first save.
    """

    def __init__(self, filepath: Path):
        self.filepath = Path(filepath)
        self._data = self._load()

    @classmethod
    def for_run(cls, out_dir: Path, command: str) -> "RunContext":
        ctx = cls(Path(out_dir) / "run.json")
        ctx._data["run_id"] = uuid.uuid4().hex[:12]
        ctx._data["command"] = command
        ctx._data["state"] = "created"
        ctx._data["history"] = []
        ctx._data["summary"] = None
        return ctx

    def _load(self) -> Dict[str, Any]:
        if self.filepath.exists():
            try:
                with open(self.filepath, "r", encoding="utf-8") as f:
                    data = json.load(f)
            except (json.JSONDecodeError, OSError) as e:
                raise RuntimeError(f"Failed to load {self.filepath}: {e}")
            return self._migrate(data)
        return self._create_default()

    def _migrate(self, data: Dict[str, Any]) -> Dict[str, Any]:
        defaults = self._create_default()
        for key, value in defaults.items():
            data.setdefault(key, value)
        data["version"] = RUN_CONTEXT_VERSION
        return data

    def _create_default(self) -> Dict[str, Any]:
        return {
            "version": RUN_CONTEXT_VERSION,
            "run_id": None,
            "command": None,
            "state": "created",
            "created_at": _now(),
            "updated_at": _now(),
            "history": [],
            "config": None,
            "artifacts": {},
            "summary": None,
        }

    def save(self) -> None:
        """Atomically write the current data to file."""
        self._data["updated_at"] = _now()
        dir_name = self.filepath.parent
        dir_name.mkdir(parents=True, exist_ok=True)
        temp_path = None
        try:
            with tempfile.NamedTemporaryFile(
                mode="w", dir=dir_name, delete=False, suffix=".tmp", prefix="run_"
            ) as tf:
                temp_path = tf.name
                json.dump(self._data, tf, indent=2, sort_keys=True)
            os.replace(temp_path, self.filepath)
        except Exception as e:
            if temp_path and os.path.exists(temp_path):
                os.unlink(temp_path)
            raise RuntimeError(f"Failed to save {self.filepath}: {e}")

    def set_state(self, state: str, reason: Optional[str] = None) -> None:
        """Record a lifecycle transition and persist."""
        self._data["state"] = state
        entry: Dict[str, Any] = {"state": state, "ts": datetime.now(timezone.utc).timestamp()}
        if reason is not None:
            entry["reason"] = reason
        self._data["history"].append(entry)
        self.save()

    def get_state(self) -> str:
        return self._data.get("state", "created")

    def get_history(self) -> List[Dict[str, Any]]:
        return self._data.get("history", [])

    def set_config(self, config: Dict[str, Any]) -> None:
        self._data["config"] = config
        self.save()

    def get_config(self) -> Optional[Dict[str, Any]]:
        return self._data.get("config")

    def add_artifact(self, name: str, path: Path) -> None:
        self._data["artifacts"][name] = str(path)
        self.save()

    def get_artifact(self, name: str) -> Optional[str]:
        return self._data.get("artifacts", {}).get(name)

    def set_summary(self, summary: Dict[str, Any]) -> None:
        self._data["summary"] = summary
        self.save()

    def get_summary(self) -> Optional[Dict[str, Any]]:
        return self._data.get("summary")

    @property
    def run_id(self) -> Optional[str]:
        return self._data.get("run_id")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._data)
