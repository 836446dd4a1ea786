"""Append-log and snapshot persistence for a node's file catalogue."""

import json
import os
import tempfile
from typing import Any, Dict, Iterator, Optional, Tuple
from urllib.parse import quote, unquote

from gridbox.errors import GridError

JOURNAL_FILE = "catalog.journal"
SNAPSHOT_FILE = "catalog.snapshot"


def _encode(value: Any) -> str:
    return quote(json.dumps(value, sort_keys=True, separators=(",", ":")), safe="")


def _decode(text: str) -> Any:
    return json.loads(unquote(text))


class CatalogJournal:
    """Writes one ``SEQ <n> <op> <args>`` line per catalogue mutation."""

    def __init__(self, state_dir: str, logger):
        self.state_dir = state_dir
        self.logger = logger
        self.journal_path = os.path.join(state_dir, JOURNAL_FILE)
        self.snapshot_path = os.path.join(state_dir, SNAPSHOT_FILE)
        self.seq = 0

    def append(self, op: str, args: Dict[str, Any]) -> int:
        os.makedirs(self.state_dir, exist_ok=True)
        self.seq += 1
        line = f"SEQ {self.seq} {op} {_encode(args)}\n"
        try:
            with open(self.journal_path, "a", encoding="utf-8") as file_obj:
                file_obj.write(line)
        except OSError as exc:
            raise GridError(
                "JournalError", f"could not append to {self.journal_path}: {exc}"
            ) from exc
        return self.seq

    def records(self, after: int = 0) -> Iterator[Tuple[int, str, Dict[str, Any]]]:
        if not os.path.exists(self.journal_path):
            return
        try:
            with open(self.journal_path, "r", encoding="utf-8") as file_obj:
                lines = file_obj.read().splitlines()
        except OSError as exc:
            raise GridError("JournalError", f"could not read {self.journal_path}: {exc}") from exc

        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            parts = line.split(" ", 3)
            if len(parts) != 4 or parts[0] != "SEQ":
                raise GridError("JournalError", f"{self.journal_path}:{number} is malformed")
            seq = int(parts[1])
            self.seq = max(self.seq, seq)
            if seq > after:
                yield seq, parts[2], _decode(parts[3])

    def write_snapshot(self, state: Dict[str, Any]):
        """Atomically replace the snapshot and truncate the journal it covers."""
        os.makedirs(self.state_dir, exist_ok=True)
        lines = [f"seq={self.seq}"]
        for directory in state["dirs"]:
            lines.append(f"dir={quote(directory, safe='/')}")
        for directory, columns in sorted(state["schemas"].items()):
            lines.append(f"schema={quote(directory, safe='/')} {_encode(columns)}")
        for entry in state["entries"]:
            lines.append("")
            for key in sorted(entry):
                lines.append(f"{key}={_encode(entry[key])}")

        self._atomic_write(self.snapshot_path, "\n".join(lines) + "\n")
        self._atomic_write(self.journal_path, "")
        self.logger.debug("Catalogue snapshot written at seq %s", self.seq)

    def read_snapshot(self) -> Optional[Dict[str, Any]]:
        if not os.path.exists(self.snapshot_path):
            return None
        try:
            with open(self.snapshot_path, "r", encoding="utf-8") as file_obj:
                text = file_obj.read()
        except OSError as exc:
            raise GridError("JournalError", f"could not read {self.snapshot_path}: {exc}") from exc

        state: Dict[str, Any] = {"seq": 0, "dirs": [], "schemas": {}, "entries": []}
        current: Optional[Dict[str, Any]] = None
        for line in text.splitlines():
            if not line:
                current = {}
                state["entries"].append(current)
                continue
            key, _, value = line.partition("=")
            if current is not None:
                current[key] = _decode(value)
            elif key == "seq":
                state["seq"] = int(value)
            elif key == "dir":
                state["dirs"].append(unquote(value))
            elif key == "schema":
                directory, _, columns = value.partition(" ")
                state["schemas"][unquote(directory)] = _decode(columns)
        state["entries"] = [entry for entry in state["entries"] if entry]
        self.seq = state["seq"]
        return state

    @staticmethod
    def _atomic_write(path: str, content: str):
        fd, temp_path = tempfile.mkstemp(prefix=".catalog-", dir=os.path.dirname(path) or ".")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as file_obj:
                file_obj.write(content)
            os.replace(temp_path, path)
        except OSError as exc:
            raise GridError("JournalError", f"could not write {path}: {exc}") from exc
        finally:
            if os.path.exists(temp_path):
                try:
                    os.remove(temp_path)
                except OSError:
                    pass
