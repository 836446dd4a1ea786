"""Task and transfer queues of a VO, driven by broker/optimizer/transfer/CE cycles."""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from gridbox.errors import GridError
from gridbox.models import FileEntry, PhysicalLocation, Task, TransferRequest
from gridbox.services.broker import rank_candidates
from gridbox.services.jdl import JobDescriptor, parse_jdl
from gridbox.services.optimizer import optimizer_pass

TERMINAL_STATES = ("DONE", "ERROR", "KILLED")
TRANSITIONS = {
    "WAITING": ("ASSIGNED", "KILLED"),
    "ASSIGNED": ("RUNNING", "KILLED"),
    "RUNNING": ("DONE", "ERROR", "KILLED"),
}
_UNREACHABLE = frozenset({"NoRoute", "Timeout", "ChannelClosed", "MacMismatch"})

EventHook = Callable[[str, str], None]


def transition_allowed(from_status: str, to_status: str) -> bool:
    return to_status in TRANSITIONS.get(from_status, ())


def history_problems(task: Task) -> List[str]:
    """Entries in a task's history that break the state machine."""
    problems = []
    status = ""
    for _, from_status, to_status, _ in task.history:
        if from_status != status:
            problems.append(f"{task.task_id}: entry from {from_status} while {status or 'new'}")
        if status and not transition_allowed(from_status, to_status):
            problems.append(f"{task.task_id}: {from_status} -> {to_status}")
        status = to_status
    return problems


class JobManager:
    def __init__(
        self,
        node_id: str,
        topology,
        router,
        clock,
        logger,
        algorithm_known: Callable[[str], bool],
        on_event: Optional[EventHook] = None,
    ):
        self.node_id = node_id
        self.topology = topology
        self.router = router
        self.clock = clock
        self.logger = logger
        self.algorithm_known = algorithm_known
        self.on_event = on_event
        self.tasks: Dict[str, Task] = {}
        self.transfers: Dict[str, TransferRequest] = {}
        self._descriptors: Dict[str, JobDescriptor] = {}
        self._task_counter = 0
        self._transfer_counter = 0
        self._lock = threading.RLock()
        self._cycle_locks = {
            kind: threading.Lock() for kind in ("broker", "optimizer", "transfers", "ce")
        }

    # queue

    def submit(self, jdl_text: str, owner: str, vo: str) -> str:
        descriptor = parse_jdl(jdl_text)
        if not self.algorithm_known(descriptor.executable):
            raise GridError("UnknownAlgorithm", f"{descriptor.executable} is not registered")
        with self._lock:
            self._task_counter += 1
            task_id = f"{self.node_id}-task-{self._task_counter:04d}"
            task = Task(task_id=task_id, jdl_text=jdl_text, owner=owner, vo=vo)
            task.history.append((self._now(), "", "WAITING", "submitted"))
            self.tasks[task_id] = task
            self._descriptors[task_id] = descriptor
        self._emit("task", f"{task_id} WAITING {descriptor.executable}")
        return task_id

    def status(self, task_id: str) -> Task:
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                raise GridError("NoSuchTask", f"no task {task_id}")
            return Task.from_dict(task.to_dict())

    def kill(self, task_id: str):
        with self._lock:
            task = self.tasks.get(task_id)
            if task is None:
                raise GridError("NoSuchTask", f"no task {task_id}")
            if task.status in TERMINAL_STATES:
                raise GridError("InvalidTransition", f"{task_id} is already {task.status}")
            self._move(task, "KILLED", "killed by request")

    def queue_lengths(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        with self._lock:
            for task in self.tasks.values():
                if task.status in ("ASSIGNED", "RUNNING") and task.assigned_ce:
                    counts[task.assigned_ce] = counts.get(task.assigned_ce, 0) + 1
        return counts

    def transfer_list(self) -> List[TransferRequest]:
        with self._lock:
            return [self.transfers[key] for key in sorted(self.transfers)]

    # cycles

    def tick_broker(self) -> List[Tuple[str, str]]:
        """Assign WAITING tasks whose best match is data-local."""
        assigned: List[Tuple[str, str]] = []
        with self._cycle("broker") as running:
            if not running:
                return assigned
            for task_id, descriptor, vo in self._waiting():
                entries = self._input_entries(descriptor)
                replicas = {lfn: {r.se_id for r in e.replicas} for lfn, e in entries.items()}
                ads = self.topology.resource_ads(vo, self.queue_lengths())
                ranked = rank_candidates(descriptor, ads, replicas)
                if not ranked or not ranked[0][1]:
                    continue
                ce_id = ranked[0][0].ce_id
                with self._lock:
                    task = self.tasks[task_id]
                    if task.status != "WAITING":
                        continue
                    task.assigned_ce = ce_id
                    self._move(task, "ASSIGNED", ce_id)
                assigned.append((task_id, ce_id))
        return assigned

    def tick_optimizer(self) -> List[TransferRequest]:
        with self._cycle("optimizer") as running:
            if not running:
                return []
            waiting = self._waiting()
            if not waiting:
                return []
            entries: Dict[str, FileEntry] = {}
            for _, descriptor, _ in waiting:
                entries.update(self._input_entries(descriptor))
            created: List[TransferRequest] = []
            for vo in sorted({vo for _, _, vo in waiting}):
                ads = self.topology.resource_ads(vo, self.queue_lengths())
                created += optimizer_pass(
                    [descriptor for _, descriptor, task_vo in waiting if task_vo == vo],
                    self.transfer_list() + created,
                    ads,
                    entries,
                    self._next_transfer_id,
                )
            with self._lock:
                for request in created:
                    self.transfers[request.transfer_id] = request
            for request in created:
                self._emit(
                    "transfer",
                    f"{request.transfer_id} WAITING {request.lfn} "
                    f"{request.source_se}>{request.dest_se}",
                )
            return created

    def tick_transfers(self) -> List[Tuple[str, str]]:
        outcomes: List[Tuple[str, str]] = []
        with self._cycle("transfers") as running:
            if not running:
                return outcomes
            for request in self.transfer_list():
                if request.status != "WAITING":
                    continue
                self._set_transfer(request, "TRANSFERRING")
                try:
                    source_node = self.topology.node_for_se(request.source_se)
                    self.router.call(source_node, "ftd.transfer", {"request": request.to_dict()})
                    home = self.topology.home_node(request.lfn)
                    self.router.call(
                        home.node_id,
                        "dbproxy.execute",
                        {
                            "stmt": "add_replica",
                            "lfn": request.lfn,
                            "location": PhysicalLocation(
                                request.dest_se, request.object_key
                            ).to_dict(),
                        },
                    )
                except GridError as exc:
                    if exc.code == "DuplicateReplica":
                        self._set_transfer(request, "DONE")
                    else:
                        self.logger.warning("Transfer %s failed: %s", request.transfer_id, exc)
                        self._set_transfer(request, "FAILED", exc.code)
                else:
                    self._set_transfer(request, "DONE")
                outcomes.append((request.transfer_id, request.status))
        return outcomes

    def tick_ce(self) -> List[Tuple[str, str]]:
        outcomes: List[Tuple[str, str]] = []
        with self._cycle("ce") as running:
            if not running:
                return outcomes
            with self._lock:
                assigned = [t.task_id for t in self._sorted_tasks() if t.status == "ASSIGNED"]
            for task_id in assigned:
                with self._lock:
                    task = self.tasks[task_id]
                    ce_id = task.assigned_ce or ""
                node_id = self.topology.node_for_ce(ce_id)
                try:
                    self.router.route(node_id)
                except GridError as exc:
                    self.logger.info(
                        "CE %s unreachable, %s stays ASSIGNED: %s", ce_id, task_id, exc
                    )
                    continue
                with self._lock:
                    if task.status != "ASSIGNED":
                        continue
                    self._move(task, "RUNNING", ce_id)
                try:
                    result = self.router.call(
                        node_id,
                        "ce.execute",
                        {
                            "task_id": task_id,
                            "ce_id": ce_id,
                            "jdl_text": task.jdl_text,
                            "vo": task.vo,
                        },
                    )
                except GridError as exc:
                    with self._lock:
                        if task.status == "RUNNING":
                            self._move(task, "ERROR", f"{exc.code}: {exc.message}")
                else:
                    with self._lock:
                        if task.status == "RUNNING":
                            task.result_lfn = result.get("result_lfn") or None
                            self._move(task, "DONE", result.get("checksum", ""))
                outcomes.append((task_id, task.status))
        return outcomes

    def tick_all(self) -> Dict[str, list]:
        return {
            "broker": self.tick_broker(),
            "optimizer": self.tick_optimizer(),
            "transfers": self.tick_transfers(),
            "ce": self.tick_ce(),
        }

    # internals

    @contextmanager
    def _cycle(self, kind: str) -> Iterator[bool]:
        lock = self._cycle_locks[kind]
        acquired = lock.acquire(blocking=False)
        try:
            yield acquired
        finally:
            if acquired:
                lock.release()

    def _sorted_tasks(self) -> List[Task]:
        return [self.tasks[key] for key in sorted(self.tasks)]

    def _waiting(self) -> List[Tuple[str, JobDescriptor, str]]:
        with self._lock:
            return [
                (task.task_id, self._descriptors[task.task_id], task.vo)
                for task in self._sorted_tasks()
                if task.status == "WAITING"
            ]

    def _input_entries(self, descriptor: JobDescriptor) -> Dict[str, FileEntry]:
        entries: Dict[str, FileEntry] = {}
        for lfn in descriptor.input_data:
            try:
                home = self.topology.home_node(lfn)
                response = self.router.call(
                    home.node_id, "dbproxy.execute", {"stmt": "lookup", "lfn": lfn}
                )
            except GridError as exc:
                if exc.code not in _UNREACHABLE and exc.code != "NotFound":
                    self.logger.warning("Lookup of %s failed: %s", lfn, exc)
                continue
            entries[lfn] = FileEntry.from_dict(response["entry"])
        return entries

    def _next_transfer_id(self) -> str:
        with self._lock:
            self._transfer_counter += 1
            return f"{self.node_id}-xfer-{self._transfer_counter:04d}"

    def _move(self, task: Task, to_status: str, note: str = ""):
        if not transition_allowed(task.status, to_status):
            raise GridError("InvalidTransition", f"{task.task_id}: {task.status} -> {to_status}")
        task.history.append((self._now(), task.status, to_status, note))
        task.status = to_status
        self._emit("task", f"{task.task_id} {to_status} {note}".rstrip())

    def _set_transfer(self, request: TransferRequest, status: str, error: Optional[str] = None):
        with self._lock:
            request.status = status
            request.error = error
        self._emit("transfer", f"{request.transfer_id} {status} {error or ''}".rstrip())

    def _now(self) -> str:
        return self.clock.now().strftime("%Y-%m-%dT%H:%M:%SZ")

    def _emit(self, kind: str, detail: str):
        if self.on_event is not None:
            self.on_event(kind, detail)
