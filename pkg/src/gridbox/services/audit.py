"""Append-only audit trail of the login/dispatch message hops."""

import re
import threading
from dataclasses import dataclass
from typing import List, Optional
from urllib.parse import quote, unquote

LOGIN_STEPS = (1, 2, 3, 4, 5, 6)
DISPATCH_STEPS = (7, 8, 9, 10)
GOVERNANCE_STEP = 0

_LINE_RE = re.compile(
    r"^AUD (?P<ts>\S+) step=(?P<step>\d+) session=(?P<session>\S+) "
    r"svc=(?P<svc>\S+) detail=(?P<detail>\S*)$"
)


@dataclass(frozen=True)
class AuditRecord:
    timestamp: str
    step: int
    session: str
    service: str
    detail: str = ""

    def render(self) -> str:
        return (
            f"AUD {self.timestamp} step={self.step} session={self.session} "
            f"svc={self.service} detail={quote(self.detail, safe='')}"
        )

    @classmethod
    def parse(cls, line: str) -> "AuditRecord":
        match = _LINE_RE.match(line)
        if match is None:
            raise ValueError(f"not an audit line: {line!r}")
        return cls(
            match.group("ts"),
            int(match.group("step")),
            match.group("session"),
            match.group("svc"),
            unquote(match.group("detail")),
        )


class AuditLog:
    def __init__(self, clock, path: Optional[str] = None):
        self.clock = clock
        self.path = path
        self._lines: List[str] = []
        self._lock = threading.Lock()

    def record(self, step: int, session: str, service: str, detail: str = "") -> AuditRecord:
        timestamp = self.clock.now().strftime("%Y-%m-%dT%H:%M:%SZ")
        entry = AuditRecord(timestamp, step, session, service, detail)
        line = entry.render()
        with self._lock:
            self._lines.append(line)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as file_obj:
                    file_obj.write(line + "\n")
        return entry

    def lines(self) -> List[str]:
        with self._lock:
            return list(self._lines)

    def records(self, session: Optional[str] = None) -> List[AuditRecord]:
        parsed = [AuditRecord.parse(line) for line in self.lines()]
        if session is None:
            return parsed
        return [record for record in parsed if record.session == session]


def conformance_problems(records: List[AuditRecord]) -> List[str]:
    """Check one session's trail: steps 1-6 once, then 7-10 once per request, in order."""
    steps = [record.step for record in records if record.step != GOVERNANCE_STEP]
    problems = []
    if tuple(steps[: len(LOGIN_STEPS)]) != LOGIN_STEPS:
        problems.append(f"login steps are {steps[:len(LOGIN_STEPS)]}, expected 1..6")
        return problems
    rest = steps[len(LOGIN_STEPS) :]
    if not rest:
        problems.append("no dispatch steps recorded")
    for start in range(0, len(rest), len(DISPATCH_STEPS)):
        group = tuple(rest[start : start + len(DISPATCH_STEPS)])
        if group != DISPATCH_STEPS:
            problems.append(f"dispatch steps {list(group)} at offset {start}, expected 7..10")
    return problems


def is_conformant(records: List[AuditRecord]) -> bool:
    return not conformance_problems(records)
