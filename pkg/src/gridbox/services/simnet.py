"""In-process multi-node grid: every grid-box of a topology on one simulated network."""

import hashlib
import logging
import threading
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple

from gridbox.client import GridClient
from gridbox.constants import DATA_ROOT
from gridbox.core import GridBox
from gridbox.errors import GridError
from gridbox.services.audit import AuditRecord
from gridbox.services.clock import SeededEntropy, VirtualClock
from gridbox.services.config_tree import ConfigTree
from gridbox.services.topology import GovernanceReport, Topology
from gridbox.services.transports import CapturedFrame, SimNetwork, SimTransport
from gridbox.services.wire import HostKeyring

logger = logging.getLogger("gridbox.simnet")

DEFAULT_SITES = ("oxford", "cambridge", "udine")
CENTRAL_SITE = "cern"
DEFAULT_PASSWORD = "mammogrid"
WORKSTATION_PREFIX = "ws."

FULL_TRUST = ("read-image", "read-meta", "execute")


def _escape(text: str) -> str:
    return text.replace("%", "%25").replace("|", "%7C").replace("\n", "%0A")


@dataclass(frozen=True)
class EventRecord:
    tick: int
    seq: int
    node: str
    kind: str
    detail: str

    def render(self) -> str:
        return f"{self.tick}|{self.seq}|{_escape(self.node)}|{self.kind}|{_escape(self.detail)}"


class EventLog:
    """Totally ordered by (tick, seq); seq counts every record of the run."""

    def __init__(self, clock):
        self.clock = clock
        self.records: List[EventRecord] = []
        self._seq = 0
        self._lock = threading.Lock()

    def record(self, node: str, kind: str, detail: str = "") -> EventRecord:
        with self._lock:
            self._seq += 1
            entry = EventRecord(self.clock.tick, self._seq, node, kind, detail)
            self.records.append(entry)
        return entry

    def lines(self) -> List[str]:
        with self._lock:
            return [entry.render() for entry in self.records]

    def export(self, path: Optional[str] = None) -> str:
        text = "".join(line + "\n" for line in self.lines())
        if path:
            with open(path, "w", encoding="utf-8") as file_obj:
                file_obj.write(text)
        return text

    def find(self, kind: Optional[str] = None, contains: str = "") -> List[EventRecord]:
        with self._lock:
            items = list(self.records)
        return [
            entry
            for entry in items
            if (kind is None or entry.kind == kind) and contains in entry.detail
        ]


def node_seed(seed: int, node: str) -> int:
    digest = hashlib.sha256(f"{seed}:{node}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def host_secret(seed: int, host: str) -> bytes:
    return hashlib.sha256(f"host-secret|{seed}|{host}".encode("utf-8")).digest()


def workstation_host(node_id: str) -> str:
    return f"{WORKSTATION_PREFIX}{node_id}"


def _site_users(vo: str, admin_only: bool = False) -> Dict[str, Dict[str, Any]]:
    users: Dict[str, Dict[str, Any]] = {
        f"admin@{vo}": {"roles": ["admin"], "password": DEFAULT_PASSWORD},
    }
    if not admin_only:
        users[f"alice@{vo}"] = {"roles": ["radiologist"], "password": DEFAULT_PASSWORD}
        users[f"bob@{vo}"] = {"roles": ["clinician"], "password": DEFAULT_PASSWORD}
        users[f"rita@{vo}"] = {"roles": ["researcher"], "password": DEFAULT_PASSWORD}
    return users


def default_config(
    mode: str = "P1",
    seed: int = 0,
    sites: Tuple[str, ...] = DEFAULT_SITES,
    full_trust: bool = True,
) -> Dict[str, Any]:
    """The central node at CERN plus one local grid-box per hospital site."""
    if mode == "P1":
        nodes = [{"id": CENTRAL_SITE, "site": CENTRAL_SITE, "vo": "mg"}]
        nodes += [{"id": site, "site": site, "vo": "mg"} for site in sites]
        return {
            "mode": "P1",
            "seed": seed,
            "central_vo": "mg",
            "central_node": CENTRAL_SITE,
            "nodes": nodes,
            "vos": {"mg": {"users": _site_users("mg")}},
        }

    nodes = [{"id": CENTRAL_SITE, "site": CENTRAL_SITE, "vo": "central"}]
    nodes += [{"id": site, "site": site, "vo": site} for site in sites]
    vos: Dict[str, Any] = {"central": {"users": _site_users("central", admin_only=True)}}
    for site in sites:
        vos[site] = {"users": _site_users(site)}
    trust = []
    if full_trust:
        permissions = ",".join(FULL_TRUST)
        trust = [
            f"TRUST {origin} {target} {permissions} {DATA_ROOT}/{target}"
            for origin in sites
            for target in sites
            if origin != target
        ]
    return {
        "mode": "P2",
        "seed": seed,
        "central_vo": "central",
        "central_node": CENTRAL_SITE,
        "nodes": nodes,
        "vos": vos,
        "trust": trust,
    }


class SimTopology:
    """A running simulated grid: one ``GridBox`` per node sharing clock, network and VOs."""

    def __init__(self, config: Mapping[str, Any]):
        self.config = dict(config)
        self.seed = int(config.get("seed", 0))
        self.clock = VirtualClock()
        self.events = EventLog(self.clock)
        self.config_tree = ConfigTree(config.get("config") or {})
        self.topology = Topology.from_config(
            config,
            self.clock,
            logger.getChild("topology"),
            entropy=SeededEntropy(node_seed(self.seed, "vo")),
            config_tree=self.config_tree,
        )
        self.network = SimNetwork(
            self.clock,
            logger.getChild("network"),
            events=self.events,
            entropy=SeededEntropy(node_seed(self.seed, "network")),
        )
        self.keyring = HostKeyring()
        for node_id in self.topology.node_ids():
            spec = self.topology.node(node_id)
            self.keyring.add(spec.host, host_secret(self.seed, spec.host))
            workstation = workstation_host(node_id)
            self.keyring.add(workstation, host_secret(self.seed, workstation))

        self.boxes: Dict[str, GridBox] = {}
        for node_id in self.topology.node_ids():
            transport = SimTransport(
                self.network,
                self.keyring,
                SeededEntropy(node_seed(self.seed, f"wire:{node_id}")),
                logger.getChild(node_id),
            )
            box = GridBox(
                node_id,
                self.topology,
                self.keyring,
                transport,
                clock=self.clock,
                entropy=SeededEntropy(node_seed(self.seed, node_id)),
                config_tree=self.config_tree,
                events=self.events,
            )
            box.listen()
            self.boxes[node_id] = box
        for (a, b), latency in sorted(self.topology.links.items()):
            if latency:
                self.network.delay(a, b, latency)
        self._workstations: Dict[str, SimTransport] = {}
        self.events.record("-", "boot", f"mode={self.topology.mode} nodes={len(self.boxes)}")

    # layout

    @property
    def nodes(self) -> List[Tuple[str, str, str]]:
        return [
            (spec.node_id, spec.site, spec.vo)
            for spec in (self.topology.node(n) for n in self.topology.node_ids())
        ]

    @property
    def links(self) -> Dict[Tuple[str, str], int]:
        return dict(self.topology.links)

    @property
    def inspector(self):
        return self.network.inspector

    def box(self, node_id: str) -> GridBox:
        box = self.boxes.get(node_id)
        if box is None:
            raise GridError("UnknownNode", f"node {node_id} is not part of the simulation")
        return box

    # workstations

    def client(self, node_id: str) -> GridClient:
        spec = self.box(node_id).node
        host = workstation_host(node_id)
        transport = self._workstations.get(host)
        if transport is None:
            transport = SimTransport(
                self.network,
                self.keyring,
                SeededEntropy(node_seed(self.seed, host)),
                logger.getChild(host),
            )
            self._workstations[host] = transport
        return GridClient(transport, spec, host, expected_peer=spec.host)

    def default_node(self, principal: str) -> str:
        """The grid-box a user of ``principal``'s VO normally logs into."""
        vo = principal.rpartition("@")[2]
        nodes = [spec.node_id for spec in self.topology.vo_nodes(vo)]
        if self.topology.mode == "P1":
            local = [node_id for node_id in nodes if node_id != self.topology.central_node]
            nodes = local or nodes
        if not nodes:
            raise GridError("UnknownVO", f"no grid-box serves {vo}")
        return nodes[0]

    def login(
        self, principal: str, password: str = DEFAULT_PASSWORD, node: Optional[str] = None
    ) -> GridClient:
        client = self.client(node or self.default_node(principal))
        client.login(principal, password)
        return client

    # faults

    def inject(self, fault: str, a: str, b: str, value: Optional[int] = None):
        """``partition``, ``heal``, ``delay`` (ticks) or ``corrupt`` (frame number)."""
        if fault == "partition":
            self.network.partition(a, b)
        elif fault == "heal":
            self.network.heal(a, b)
        elif fault == "delay":
            self.network.delay(a, b, int(value or 0))
        elif fault == "corrupt":
            self.network.corrupt(a, b, int(value or 1))
        else:
            raise GridError("UnknownFault", f"no fault named {fault!r}")

    def partition(self, a: str, b: str):
        self.inject("partition", a, b)

    def heal(self, a: str, b: str):
        self.inject("heal", a, b)

    def delay(self, a: str, b: str, ticks: int):
        self.inject("delay", a, b, ticks)

    def corrupt(self, a: str, b: str, frame_number: int = 1):
        self.inject("corrupt", a, b, frame_number)

    # job system

    def services_nodes(self) -> List[str]:
        nodes = {
            self.topology.services_node(vo)
            for vo in self.topology.vo_service.vos
            if self.topology.vo_nodes(vo)
        }
        return sorted(nodes)

    def tick(self, kind: str = "all") -> Dict[str, Any]:
        """Run one job-system cycle on every VO services node."""
        return {node_id: self.boxes[node_id].tick(kind) for node_id in self.services_nodes()}

    def run_jobs(self, rounds: int = 8) -> int:
        """Cycle until no task is waiting, assigned or running; returns the rounds used."""
        for round_number in range(1, rounds + 1):
            self.clock.advance()
            self.tick()
            if not self.active_tasks():
                return round_number
        return rounds

    def active_tasks(self) -> List[str]:
        active = []
        for node_id in self.services_nodes():
            for task in self.boxes[node_id].jobs.tasks.values():
                if task.status in ("WAITING", "ASSIGNED", "RUNNING"):
                    active.append(task.task_id)
        return sorted(active)

    def task(self, task_id: str):
        for node_id in self.services_nodes():
            jobs = self.boxes[node_id].jobs
            if task_id in jobs.tasks:
                return jobs.status(task_id)
        raise GridError("NoSuchTask", f"no task {task_id}")

    # observation

    def audit_records(self, node_id: Optional[str] = None) -> List[AuditRecord]:
        boxes = [self.box(node_id)] if node_id else [self.boxes[n] for n in sorted(self.boxes)]
        records: List[AuditRecord] = []
        for box in boxes:
            records.extend(box.audit.records())
        return records

    def governance_audit(self) -> GovernanceReport:
        return self.box(self.topology.central_node).governance_audit()

    def leaks(self, needle: str) -> List[str]:
        """Where ``needle`` shows up in grid-box traffic or anything a grid-box holds."""
        found = [
            f"frame {frame.src}>{frame.dst} @{frame.tick}"
            for frame in self.inspector.scan(needle)
        ]
        raw = needle.encode("utf-8")
        for node_id in sorted(self.boxes):
            box = self.boxes[node_id]
            for se_id in sorted(box.storages):
                storage = box.storages[se_id]
                for meta in storage.objects():
                    if raw in storage.get(meta.object_key):
                        found.append(f"object {se_id}/{meta.object_key}")
            for entry in box.catalog.entries():
                if needle in str(entry.to_dict()):
                    found.append(f"catalogue {node_id}:{entry.lfn}")
            for line in box.audit.lines():
                if needle in line:
                    found.append(f"audit {node_id}")
                    break
        return found

    def frames(self, a: str, b: str) -> List[CapturedFrame]:
        return self.inspector.between(a, b)

    def close(self):
        for node_id in sorted(self.boxes):
            self.boxes[node_id].router.close()


def build_topology(
    config: Optional[Mapping[str, Any]] = None,
    mode: str = "P1",
    seed: int = 0,
) -> SimTopology:
    """Instantiate every grid-box of ``config`` (default: CERN plus three hospitals)."""
    if config is None:
        config = default_config(mode, seed)
    nodes = config.get("nodes") or []
    if not nodes:
        raise GridError("BadConfig", "a simulated grid needs at least one node")
    ids = [str(raw.get("id", "")) if isinstance(raw, Mapping) else "" for raw in nodes]
    duplicates = sorted({node_id for node_id in ids if ids.count(node_id) > 1})
    if duplicates:
        raise GridError("BadConfig", f"duplicate node ids: {', '.join(duplicates)}")
    return SimTopology(config)
