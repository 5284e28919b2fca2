"""Fixture recording: tee served embeddings to a JSON-Lines file.

Each line is {"key": sha256-of-canonical-content, "kind": "text"|"image",
"model": id, "embedding": [...]} — the replay format scoring clients read.
Canonical content is UTF-8 text bytes or the PNG bytes as received, so keys
match what clients compute locally.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path


class FixtureRecorder:
    """Appends one line per previously unseen (model, kind, key) triple.

    Existing lines are scanned on open, so restarting a recording service
    against the same file never duplicates entries. Thread-safe; each line
    is flushed as written, so a killed process loses nothing.
    """

    def __init__(self, path: str | Path) -> None:
        self._path = Path(path)
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str, str]] = set()
        if self._path.exists():
            for line in self._path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                self._seen.add((str(record["model"]), str(record["kind"]), str(record["key"])))
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self._path.open("a", encoding="utf-8")

    @property
    def path(self) -> Path:
        return self._path

    def record(self, model: str, kind: str, key: str, embedding: list[float]) -> bool:
        """Write one fixture line; returns False for an already-seen key."""
        with self._lock:
            if (model, kind, key) in self._seen:
                return False
            self._seen.add((model, kind, key))
            line = json.dumps({"key": key, "kind": kind, "model": model, "embedding": embedding})
            self._file.write(line + "\n")
            self._file.flush()
            return True

    def close(self) -> None:
        with self._lock:
            self._file.close()
