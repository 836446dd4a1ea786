"""Scripted scenarios: ``@<tick> <actor> <action> <args...>`` steps with ``EXPECT`` lines."""

import shlex
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from gridbox.client import GridClient
from gridbox.errors import GridError
from gridbox.services.algorithms import artifact_checksum
from gridbox.services.audit import GOVERNANCE_STEP, conformance_problems
from gridbox.services.dicom_codec import serialize
from gridbox.services.federation import ResultSet
from gridbox.services.fixtures import fixture_dataset, synthetic_dataset
from gridbox.services.simnet import DEFAULT_PASSWORD, EventLog, SimTopology
from gridbox.services.topology import Topology

ACTIONS = (
    "login",
    "logout",
    "add",
    "get",
    "update",
    "query",
    "algo-add",
    "algo-run",
    "tick",
    "partition",
    "heal",
    "delay",
    "corrupt",
    "trust-grant",
    "trust-revoke",
)
PREDICATES = {
    "ok": 0,
    "error": 1,
    "rows": 1,
    "status": 2,
    "audit-conformant": 0,
    "governance-clean": 0,
    "no-leak": 1,
    "task": 1,
}


class ScenarioParseError(GridError):
    def __init__(self, line_number: int, message: str):
        super().__init__("ScenarioParseError", f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class Expectation:
    predicate: str
    args: List[str]
    line_number: int

    def render(self) -> str:
        return " ".join([self.predicate] + self.args)


@dataclass
class Step:
    tick: int
    actor: str
    action: str
    args: List[str]
    line_number: int
    raw_args: str = ""
    expectations: List[Expectation] = field(default_factory=list)


@dataclass
class Scenario:
    steps: List[Step] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        scenario = cls()
        last_tick = 0
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("EXPECT"):
                if not scenario.steps:
                    raise ScenarioParseError(number, "EXPECT before any step")
                scenario.steps[-1].expectations.append(_parse_expectation(line, number))
                continue
            step = _parse_step(line, number)
            if step.tick < last_tick:
                raise ScenarioParseError(
                    number, f"tick {step.tick} runs backwards from {last_tick}"
                )
            last_tick = step.tick
            scenario.steps.append(step)
        return scenario

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path, "r", encoding="utf-8") as file_obj:
            return cls.parse(file_obj.read())


def _parse_step(line: str, number: int) -> Step:
    head, _, rest = line.partition(" ")
    if not head.startswith("@") or not head[1:].isdigit():
        raise ScenarioParseError(number, f"step must start with @<tick>, got {head!r}")
    parts = rest.strip().split(None, 2)
    if len(parts) < 2:
        raise ScenarioParseError(number, "step needs an actor and an action")
    actor, action = parts[0], parts[1]
    if action not in ACTIONS:
        raise ScenarioParseError(number, f"unknown action {action!r}")
    raw_args = parts[2] if len(parts) > 2 else ""
    try:
        args = shlex.split(raw_args) if action != "query" else [raw_args]
    except ValueError as exc:
        raise ScenarioParseError(number, str(exc)) from exc
    return Step(int(head[1:]), actor, action, args, number, raw_args)


def _parse_expectation(line: str, number: int) -> Expectation:
    parts = line.split()[1:]
    if not parts or parts[0] not in PREDICATES:
        raise ScenarioParseError(number, f"unknown predicate in {line!r}")
    predicate, args = parts[0], parts[1:]
    if predicate == "no-leak":
        args = [line.split(None, 2)[2]] if len(parts) > 1 else []
    if len(args) != PREDICATES[predicate]:
        raise ScenarioParseError(number, f"{predicate} takes {PREDICATES[predicate]} arguments")
    return Expectation(predicate, args, number)


@dataclass
class Outcome:
    value: Any = None
    error: Optional[GridError] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class ExpectationResult:
    step: Step
    expectation: Expectation
    passed: bool
    detail: str
    trigger: str

    def render(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} line {self.expectation.line_number} @{self.step.tick} "
            f"{self.step.actor} {self.step.action}: {self.expectation.render()} ({self.detail}) "
            f"after [{self.trigger}]"
        )


@dataclass
class ScenarioResult:
    events: EventLog
    results: List[ExpectationResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.results)

    def failures(self) -> List[ExpectationResult]:
        return [item for item in self.results if not item.passed]


def algorithm_artifact(name: str) -> bytes:
    return f"gridbox-algorithm:{name}\n".encode("utf-8")


class ScenarioRunner:
    """Executes steps against a simulated grid and evaluates their expectations."""

    def __init__(self, grid: SimTopology):
        self.grid = grid
        self.clients: Dict[str, GridClient] = {}
        self.sessions: Dict[str, Tuple[str, str]] = {}
        self.tasks: Dict[str, str] = {}
        self._actions: Dict[str, Callable[[Step], Any]] = {
            "login": self._login,
            "logout": self._logout,
            "add": self._add,
            "get": self._get,
            "update": self._update,
            "query": self._query,
            "algo-add": self._algo_add,
            "algo-run": self._algo_run,
            "tick": self._tick,
            "partition": lambda step: self._fault("partition", step),
            "heal": lambda step: self._fault("heal", step),
            "delay": lambda step: self._fault("delay", step),
            "corrupt": lambda step: self._fault("corrupt", step),
            "trust-grant": self._trust_grant,
            "trust-revoke": self._trust_revoke,
        }

    def run(self, scenario: Scenario) -> ScenarioResult:
        result = ScenarioResult(self.grid.events)
        for step in scenario.steps:
            self.grid.clock.advance_to(step.tick)
            self.grid.events.record(
                step.actor, "step", f"{step.action} {step.raw_args}".rstrip()
            )
            outcome = self._perform(step)
            if outcome.error is not None:
                self.grid.events.record(step.actor, "error", outcome.error.code)
            trigger = self.grid.events.lines()[-1]
            for expectation in step.expectations:
                passed, detail = self._check(step, expectation, outcome)
                result.results.append(ExpectationResult(step, expectation, passed, detail, trigger))
            self.grid.network.settle()
        return result

    def _perform(self, step: Step) -> Outcome:
        try:
            return Outcome(value=self._actions[step.action](step))
        except GridError as exc:
            return Outcome(error=exc)

    # actions

    def _client(self, actor: str) -> GridClient:
        client = self.clients.get(actor)
        if client is None:
            raise GridError("NotAuthenticated", f"{actor} has not logged in")
        return client

    def _login(self, step: Step) -> Any:
        password = step.args[0] if step.args else DEFAULT_PASSWORD
        node = step.args[1] if len(step.args) > 1 else self.grid.default_node(step.actor)
        client = self.grid.client(node)
        session = client.login(step.actor, password)
        self.clients[step.actor] = client
        self.sessions[step.actor] = (node, session["session_id"])
        return session

    def _logout(self, step: Step) -> Any:
        client = self._client(step.actor)
        client.logout()
        del self.clients[step.actor]
        return {}

    def _image(self, source: str, lfn: str) -> bytes:
        if source == "fixture":
            return serialize(fixture_dataset())
        kind, _, number = source.partition(":")
        if kind == "synthetic" and number.isdigit():
            return serialize(synthetic_dataset(int(number), Topology.site_of(lfn)))
        raise GridError("BadConfig", f"unknown image source {source!r}")

    def _add(self, step: Step) -> Any:
        lfn, source = _need(step, 2)
        return self._client(step.actor).add(lfn, self._image(source, lfn))

    def _get(self, step: Step) -> Any:
        lfn = _need(step, 1)[0]
        version = int(step.args[1]) if len(step.args) > 1 else None
        return self._client(step.actor).retrieve(lfn, version)

    def _update(self, step: Step) -> Any:
        lfn, source = _need(step, 2)
        return self._client(step.actor).update(lfn, self._image(source, lfn))

    def _query(self, step: Step) -> Any:
        return self._client(step.actor).query(step.raw_args, query_year=self.grid.clock.now().year)

    def _algo_add(self, step: Step) -> Any:
        name = _need(step, 1)[0]
        artifact = algorithm_artifact(name)
        return self._client(step.actor).add_algorithm(name, artifact, artifact_checksum(artifact))

    def _algo_run(self, step: Step) -> Any:
        name, output = _need(step, 2)
        task_id = self._client(step.actor).execute_algorithm(name, step.args[2:], output)
        self.tasks[step.actor] = task_id
        return task_id

    def _tick(self, step: Step) -> Any:
        kind = step.args[0] if step.args else "all"
        rounds = int(step.args[1]) if len(step.args) > 1 else 1
        outcomes = {}
        for _ in range(rounds):
            outcomes = self.grid.tick(kind)
        return outcomes

    def _fault(self, fault: str, step: Step) -> Any:
        a, b = _need(step, 2)
        value = int(step.args[2]) if len(step.args) > 2 else None
        self.grid.inject(fault, a, b, value)
        return {}

    def _trust_grant(self, step: Step) -> Any:
        from_vo, to_vo, permissions = _need(step, 3)
        args: Dict[str, Any] = {
            "from_vo": from_vo,
            "to_vo": to_vo,
            "permissions": permissions.split(","),
        }
        if len(step.args) > 3:
            args["scope"] = step.args[3]
        return self._client(step.actor).admin("trust_grant", **args)

    def _trust_revoke(self, step: Step) -> Any:
        from_vo, to_vo = _need(step, 2)
        return self._client(step.actor).admin("trust_revoke", from_vo=from_vo, to_vo=to_vo)

    # predicates

    def _check(self, step: Step, expectation: Expectation, outcome: Outcome) -> Tuple[bool, str]:
        predicate, args = expectation.predicate, expectation.args
        if predicate == "ok":
            return outcome.ok, "ok" if outcome.ok else str(outcome.error)
        if predicate == "error":
            actual = outcome.error.code if outcome.error else "ok"
            return actual == args[0], actual
        if predicate in ("rows", "status"):
            if not isinstance(outcome.value, ResultSet):
                return False, f"no result set ({outcome.error or 'not a query'})"
            if predicate == "rows":
                return len(outcome.value.rows) == int(args[0]), f"{len(outcome.value.rows)} rows"
            status = outcome.value.statuses.get(args[0], "absent")
            return status == args[1], status
        if predicate == "task":
            task_id = self.tasks.get(step.actor)
            if task_id is None:
                return False, f"{step.actor} submitted no task"
            status = self.grid.task(task_id).status
            return status == args[0], f"{task_id} {status}"
        if predicate == "audit-conformant":
            return self._audit_conformant(step.actor)
        if predicate == "governance-clean":
            report = self.grid.governance_audit()
            detail = f"violations={len(report.violations)} central={report.central_patient_rows}"
            return report.clean, detail
        leaks = self.grid.leaks(args[0])
        return not leaks, ", ".join(leaks[:3]) or "clean"

    def _audit_conformant(self, actor: str) -> Tuple[bool, str]:
        if actor not in self.sessions:
            return False, f"{actor} has no session"
        node_id, session_id = self.sessions[actor]
        records = self.grid.box(node_id).audit.records(session_id)
        problems = conformance_problems(records)
        steps = [record.step for record in records if record.step != GOVERNANCE_STEP]
        return not problems, "; ".join(problems) or f"steps {steps}"


def _need(step: Step, count: int) -> List[str]:
    if len(step.args) < count:
        raise GridError("BadConfig", f"{step.action} needs {count} arguments")
    return step.args[:count]


def run_scenario(grid: SimTopology, scenario: Scenario) -> ScenarioResult:
    """Play ``scenario`` on ``grid``; every expectation is evaluated, none short-circuits."""
    return ScenarioRunner(grid).run(scenario)
