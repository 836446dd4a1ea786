"""Deployment topology (P1/P2), Super-VO tree, foreign grids and governance audits."""

import base64
import binascii
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

from gridbox.constants import DATA_ROOT
from gridbox.errors import GridError
from gridbox.models import NodeSpec, ResourceAd
from gridbox.services.vo import VOService

MODES = ("P1", "P2")


@dataclass(frozen=True)
class ForeignGridAdapter:
    """A whole foreign grid seen as one computing and one storage element."""

    grid_id: str
    host_vo: str
    gateway_node: str
    max_running: int = 8
    packages: Tuple[str, ...] = ("checksum", "histogram", "noop-cade")

    @property
    def ce_id(self) -> str:
        return f"{self.grid_id}:ce"

    @property
    def se_id(self) -> str:
        return f"{self.grid_id}:se"

    def presented_ad(self, queue_length: int = 0) -> ResourceAd:
        return ResourceAd(
            ce_id=self.ce_id,
            site=self.grid_id,
            vo=self.host_vo,
            max_running=self.max_running,
            queue_length=queue_length,
            packages=frozenset(self.packages),
            local_se=self.se_id,
        )


class Topology:
    def __init__(
        self,
        mode: str,
        nodes: List[NodeSpec],
        vo_service: VOService,
        central_vo: str,
        central_node: str,
        logger,
        seed: int = 0,
    ):
        self.mode = mode
        self.nodes: Dict[str, NodeSpec] = {}
        for node in nodes:
            if node.node_id in self.nodes:
                raise GridError("BadConfig", f"duplicate node id {node.node_id}")
            self.nodes[node.node_id] = node
        self.vo_service = vo_service
        self.central_vo = central_vo
        self.central_node = central_node
        self.logger = logger
        self.seed = seed
        self.supervo: Dict[str, List[str]] = {}
        self.foreign: Dict[str, ForeignGridAdapter] = {}
        self.links: Dict[Tuple[str, str], int] = {}
        self._lock = threading.RLock()

    # lookups

    def node(self, node_id: str) -> NodeSpec:
        spec = self.nodes.get(node_id)
        if spec is None:
            raise GridError("UnknownNode", f"node {node_id} is not part of the topology")
        return spec

    def node_ids(self) -> List[str]:
        return sorted(self.nodes)

    def node_for_host(self, host: str) -> Optional[NodeSpec]:
        for spec in self.nodes.values():
            if spec.host == host:
                return spec
        return None

    def node_for_site(self, site: str) -> NodeSpec:
        for node_id in sorted(self.nodes):
            if self.nodes[node_id].site == site:
                return self.nodes[node_id]
        raise GridError("UnknownNode", f"no grid-box serves site {site}")

    @staticmethod
    def site_of(lfn: str) -> str:
        prefix = DATA_ROOT + "/"
        if not lfn.startswith(prefix) or len(lfn.split("/")) < 3:
            raise GridError("NotFound", f"{lfn} is not under {DATA_ROOT}/<site>")
        return lfn.split("/")[2]

    def home_node(self, lfn: str) -> NodeSpec:
        """The grid-box whose catalogue governs ``lfn``."""
        return self.node_for_site(self.site_of(lfn))

    def node_for_se(self, se_id: str) -> str:
        owner, _, kind = se_id.partition(":")
        if kind != "se":
            raise GridError("UnknownNode", f"{se_id} is not a storage element id")
        if owner in self.nodes:
            return owner
        adapter = self.foreign.get(owner)
        if adapter is not None:
            return adapter.gateway_node
        raise GridError("UnknownNode", f"no node hosts {se_id}")

    def node_for_ce(self, ce_id: str) -> str:
        owner, _, kind = ce_id.partition(":")
        if kind != "ce":
            raise GridError("UnknownNode", f"{ce_id} is not a computing element id")
        if owner in self.nodes:
            return owner
        adapter = self.foreign.get(owner)
        if adapter is not None:
            return adapter.gateway_node
        raise GridError("UnknownNode", f"no node hosts {ce_id}")

    def vo_nodes(self, vo: str) -> List[NodeSpec]:
        return [self.nodes[n] for n in sorted(self.nodes) if self.nodes[n].vo == vo]

    def services_node(self, vo: str) -> str:
        """Node running the VO's catalogue of record and job system."""
        descriptor = self.vo_service.descriptor(vo)
        if descriptor.catalogue_node:
            return descriptor.catalogue_node
        nodes = self.vo_nodes(vo)
        if not nodes:
            raise GridError("UnknownNode", f"VO {vo} has no grid-box")
        return nodes[0].node_id

    def data_vos(self) -> List[str]:
        if self.mode == "P1":
            return [self.central_vo]
        return sorted(name for name in self.vo_service.vos if name != self.central_vo)

    def resource_ads(self, vo: str, queue_lengths: Mapping[str, int]) -> List[ResourceAd]:
        ads = [
            ResourceAd(
                ce_id=spec.ce_id,
                site=spec.site,
                vo=spec.vo,
                max_running=spec.max_running,
                queue_length=queue_lengths.get(spec.ce_id, 0),
                packages=frozenset(spec.packages),
                local_se=spec.se_id,
            )
            for spec in self.vo_nodes(vo)
        ]
        for grid_id in sorted(self.foreign):
            adapter = self.foreign[grid_id]
            if adapter.host_vo == vo:
                ads.append(adapter.presented_ad(queue_lengths.get(adapter.ce_id, 0)))
        return ads

    # mode

    def validate(self, mode: Optional[str] = None):
        mode = mode or self.mode
        if mode not in MODES:
            raise GridError("InvalidTopology", f"unknown mode {mode}")
        if self.central_node not in self.nodes:
            raise GridError("InvalidTopology", f"central node {self.central_node} is missing")
        names = set(self.vo_service.vos)
        if mode == "P1":
            if names != {self.central_vo}:
                raise GridError("InvalidTopology", "P1 needs exactly one VO")
        else:
            if self.central_vo not in names or len(names - {self.central_vo}) < 2:
                raise GridError("InvalidTopology", "P2 needs two or more VOs plus a central VO")
        for spec in self.nodes.values():
            if self.vo_service.site_owner(spec.site) != spec.vo:
                raise GridError(
                    "InvalidTopology", f"site {spec.site} is not registered with VO {spec.vo}"
                )

    def set_mode(self, mode: str, live_sessions: int = 0):
        with self._lock:
            if live_sessions:
                raise GridError(
                    "InvalidTopology", f"{live_sessions} live sessions; quiesce before switching"
                )
            self.validate(mode)
            self.mode = mode
            self.logger.info("Topology switched to %s", mode)

    # super-VO

    def supervo_attach(self, parent: str, child: str):
        with self._lock:
            if parent == child or parent in self.supervo_descendants(child):
                raise GridError("CycleDetected", f"attaching {child} under {parent} forms a cycle")
            children = self.supervo.setdefault(parent, [])
            if child not in children:
                children.append(child)
                children.sort()

    def supervo_descendants(self, root: str) -> List[str]:
        seen: List[str] = []
        stack = [root]
        while stack:
            current = stack.pop()
            for child in self.supervo.get(current, []):
                if child not in seen:
                    seen.append(child)
                    stack.append(child)
        return sorted(seen)

    def supervo_leaves(self, root: str) -> List[str]:
        if not self.supervo.get(root):
            return [root]
        return sorted(name for name in self.supervo_descendants(root) if not self.supervo.get(name))

    # foreign grids

    def foreign_attach(self, adapter: ForeignGridAdapter):
        with self._lock:
            if adapter.grid_id in self.foreign or adapter.grid_id in self.nodes:
                raise GridError("Duplicate", f"grid {adapter.grid_id} is already attached")
            self.vo_service.descriptor(adapter.host_vo)
            if self.node(adapter.gateway_node).vo != adapter.host_vo:
                raise GridError(
                    "InvalidTopology", f"gateway {adapter.gateway_node} is not in {adapter.host_vo}"
                )
            self.foreign[adapter.grid_id] = adapter
            self.logger.info(
                "Attached foreign grid %s via %s", adapter.grid_id, adapter.gateway_node
            )

    def foreign_detach(self, grid_id: str):
        with self._lock:
            if self.foreign.pop(grid_id, None) is None:
                raise GridError("NotFound", f"grid {grid_id} is not attached")

    # construction

    @classmethod
    def from_config(cls, config: Mapping[str, Any], clock, logger, entropy=None, config_tree=None):
        """Build a topology and its VO directory from a topology mapping."""
        mode = str(config.get("mode", "P1"))
        seed = int(config.get("seed", 0))
        raw_nodes = config.get("nodes") or []
        if not raw_nodes:
            raise GridError("BadConfig", "topology needs at least one node")

        nodes = []
        for raw in raw_nodes:
            if not isinstance(raw, Mapping) or "id" not in raw:
                raise GridError("BadConfig", f"node entry needs an id: {raw!r}")
            nodes.append(
                NodeSpec(
                    node_id=str(raw["id"]),
                    site=str(raw.get("site", raw["id"])),
                    vo=str(raw.get("vo", config.get("central_vo", "mg"))),
                    host_id=str(raw.get("host_id", "")),
                    address=str(raw.get("address", "")),
                    max_running=int(raw.get("max_running", 4)),
                    packages=tuple(raw.get("packages", NodeSpec.packages)),
                )
            )

        vo_service = VOService(clock, logger, entropy=entropy, config_tree=config_tree)
        raw_vos: Mapping[str, Any] = config.get("vos") or {}
        central_vo = str(config.get("central_vo", "mg" if mode == "P1" else "central"))
        names = sorted(set(raw_vos) | {node.vo for node in nodes} | {central_vo})
        for name in names:
            settings = raw_vos.get(name) or {}
            vo_service.vo_create(
                name,
                key=_vo_key(settings.get("key"), seed, name),
                packages=settings.get("packages", ()),
                partitions=settings.get("partitions", ()),
            )
            for principal, user in sorted((settings.get("users") or {}).items()):
                user = user or {}
                vo_service.vo_add_user(
                    name,
                    principal,
                    user.get("roles", []),
                    password=user.get("password"),
                    password_hash=user.get("password_hash"),
                )
        for node in nodes:
            vo_service.vo_add_site(node.vo, node.site)

        central_node = str(config.get("central_node", "") or "")
        if not central_node:
            candidates = [node.node_id for node in nodes if node.vo == central_vo]
            central_node = candidates[0] if candidates else nodes[0].node_id

        topology = cls(mode, nodes, vo_service, central_vo, central_node, logger, seed=seed)
        if mode == "P1":
            vo_service.descriptor(central_vo).catalogue_node = central_node

        for line in config.get("trust") or []:
            vo_service.load_trust_table(str(line))
        for parent, children in (config.get("supervo") or {}).items():
            for child in children:
                topology.supervo_attach(str(parent), str(child))
        for raw in config.get("foreign_grids") or []:
            topology.foreign_attach(
                ForeignGridAdapter(
                    grid_id=str(raw["grid_id"]),
                    host_vo=str(raw["host_vo"]),
                    gateway_node=str(raw["gateway"]),
                    max_running=int(raw.get("max_running", 8)),
                    packages=tuple(raw.get("packages", ForeignGridAdapter.packages)),
                )
            )
        for pair, latency in (config.get("links") or {}).items():
            a, _, b = str(pair).partition("-")
            topology.links[tuple(sorted((a, b)))] = int(latency)  # type: ignore[index]
        topology.validate()
        return topology


def _vo_key(raw: Optional[str], seed: int, name: str) -> bytes:
    if raw:
        try:
            key = base64.b64decode(raw, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise GridError("BadConfig", f"VO {name} key is not base64") from exc
        if len(key) != 32:
            raise GridError("BadConfig", f"VO {name} key must be 32 bytes")
        return key
    return hashlib.sha256(f"vo-key|{seed}|{name}".encode("utf-8")).digest()


@dataclass
class NodeSnapshot:
    """Read-only governance view of one grid-box."""

    node_id: str
    vo: str
    entries: List[Dict[str, Any]] = field(default_factory=list)
    objects: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_id": self.node_id,
            "vo": self.vo,
            "entries": self.entries,
            "objects": self.objects,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NodeSnapshot":
        return cls(data["node_id"], data["vo"], list(data["entries"]), list(data["objects"]))


@dataclass
class GovernanceReport:
    violations: List[str] = field(default_factory=list)
    exempt: List[str] = field(default_factory=list)
    unreachable: List[str] = field(default_factory=list)
    central_patient_rows: int = 0
    mode: str = "P1"

    @property
    def clean(self) -> bool:
        if self.violations:
            return False
        return self.mode == "P1" or self.central_patient_rows == 0

    def render(self) -> str:
        lines = [
            f"GOVERNANCE mode={self.mode} violations={len(self.violations)} "
            f"exempt={len(self.exempt)} central_patient_rows={self.central_patient_rows}"
        ]
        lines += [f"VIOLATION {item}" for item in self.violations]
        lines += [f"EXEMPT {item}" for item in self.exempt]
        lines += [f"UNREACHABLE {item}" for item in self.unreachable]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "violations": self.violations,
            "exempt": self.exempt,
            "unreachable": self.unreachable,
            "central_patient_rows": self.central_patient_rows,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GovernanceReport":
        return cls(
            list(data["violations"]),
            list(data["exempt"]),
            list(data["unreachable"]),
            int(data["central_patient_rows"]),
            data["mode"],
        )


def audit_governance(
    topology: Topology,
    snapshots: Mapping[str, NodeSnapshot],
    unreachable: Optional[List[str]] = None,
) -> GovernanceReport:
    """Report records hosted outside the VO that owns them."""
    report = GovernanceReport(mode=topology.mode, unreachable=sorted(unreachable or []))
    central_nodes = {spec.node_id for spec in topology.vo_nodes(topology.central_vo)}
    if topology.mode == "P1":
        central_nodes = {topology.central_node}

    for node_id in sorted(snapshots):
        snapshot = snapshots[node_id]
        for entry in snapshot.entries:
            label = f"{node_id} catalogue {entry['lfn']} owner={entry['owner_vo']}"
            if entry.get("mirror"):
                report.exempt.append(f"{label} (central metadata mirror)")
            elif entry["owner_vo"] != snapshot.vo:
                report.violations.append(label)
            if node_id in central_nodes and entry["lfn"].startswith(DATA_ROOT + "/"):
                report.central_patient_rows += 1
        for obj in snapshot.objects:
            if obj["owner_vo"] == snapshot.vo:
                continue
            label = f"{node_id} {obj['se_id']} {obj['object_key']} owner={obj['owner_vo']}"
            provenance = obj.get("provenance", "")
            if provenance == "cache" or provenance.startswith("transfer:"):
                report.exempt.append(f"{label} ({provenance})")
            else:
                report.violations.append(label)
    return report
