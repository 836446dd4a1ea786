"""Shared domain models for gridbox."""

from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Dict, FrozenSet, List, Optional, Tuple


@dataclass(frozen=True, order=True)
class PhysicalLocation:
    """One replica of a file: an object key at a node-qualified storage element."""

    se_id: str
    object_key: str

    def to_dict(self) -> Dict[str, str]:
        return {"se_id": self.se_id, "object_key": self.object_key}

    @classmethod
    def from_dict(cls, data: Dict[str, str]) -> "PhysicalLocation":
        return cls(se_id=data["se_id"], object_key=data["object_key"])


@dataclass
class FileEntry:
    guid: str
    lfn: str
    size: int
    checksum: str
    owner_vo: str
    version: int = 1
    replicas: List[PhysicalLocation] = field(default_factory=list)
    attrs: Dict[str, Any] = field(default_factory=dict)
    home_node: str = ""
    mirror: bool = False

    def copy(self) -> "FileEntry":
        return replace(self, replicas=list(self.replicas), attrs=dict(self.attrs))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "guid": self.guid,
            "lfn": self.lfn,
            "size": self.size,
            "checksum": self.checksum,
            "owner_vo": self.owner_vo,
            "version": self.version,
            "replicas": [replica.to_dict() for replica in self.replicas],
            "attrs": dict(self.attrs),
            "home_node": self.home_node,
            "mirror": self.mirror,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FileEntry":
        return cls(
            guid=data["guid"],
            lfn=data["lfn"],
            size=int(data["size"]),
            checksum=data["checksum"],
            owner_vo=data["owner_vo"],
            version=int(data.get("version", 1)),
            replicas=[PhysicalLocation.from_dict(item) for item in data.get("replicas", [])],
            attrs=dict(data.get("attrs", {})),
            home_node=data.get("home_node", ""),
            mirror=bool(data.get("mirror", False)),
        )


@dataclass(frozen=True)
class Endpoint:
    node_id: str
    service_name: str
    instance_id: str

    def __str__(self) -> str:
        return f"{self.node_id}/{self.service_name}/{self.instance_id}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        node_id, service_name, instance_id = text.split("/", 2)
        return cls(node_id, service_name, instance_id)


@dataclass(frozen=True)
class Credentials:
    """Login material; ``mechanism`` is one of PWD, HOSTCERT or TOKEN."""

    principal: str
    mechanism: str
    secret: str

    @property
    def user(self) -> str:
        return self.principal.rpartition("@")[0]

    @property
    def vo(self) -> str:
        return self.principal.rpartition("@")[2]


@dataclass(frozen=True)
class SessionToken:
    token: str
    principal: str
    issued_at: datetime
    expires_at: datetime
    portal: Endpoint
    session_id: str

    @property
    def vo(self) -> str:
        return self.principal.rpartition("@")[2]


@dataclass(frozen=True)
class ResourceAd:
    ce_id: str
    site: str
    vo: str
    max_running: int
    queue_length: int
    packages: FrozenSet[str]
    local_se: str

    def as_attrs(self) -> Dict[str, Any]:
        return {
            "ce_id": self.ce_id,
            "site": self.site,
            "vo": self.vo,
            "max_running": self.max_running,
            "queue_length": self.queue_length,
            "packages": self.packages,
            "local_se": self.local_se,
        }


@dataclass
class Task:
    task_id: str
    jdl_text: str
    owner: str
    vo: str
    status: str = "WAITING"
    assigned_ce: Optional[str] = None
    result_lfn: Optional[str] = None
    history: List[Tuple[str, str, str, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "jdl_text": self.jdl_text,
            "owner": self.owner,
            "vo": self.vo,
            "status": self.status,
            "assigned_ce": self.assigned_ce,
            "result_lfn": self.result_lfn,
            "history": [list(item) for item in self.history],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Task":
        return cls(
            task_id=data["task_id"],
            jdl_text=data["jdl_text"],
            owner=data["owner"],
            vo=data["vo"],
            status=data["status"],
            assigned_ce=data.get("assigned_ce"),
            result_lfn=data.get("result_lfn"),
            history=[tuple(item) for item in data.get("history", [])],  # type: ignore[misc]
        )


@dataclass
class TransferRequest:
    transfer_id: str
    guid: str
    lfn: str
    object_key: str
    source_se: str
    dest_se: str
    checksum: str
    status: str = "WAITING"
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "transfer_id": self.transfer_id,
            "guid": self.guid,
            "lfn": self.lfn,
            "object_key": self.object_key,
            "source_se": self.source_se,
            "dest_se": self.dest_se,
            "checksum": self.checksum,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransferRequest":
        return cls(**data)


@dataclass(frozen=True)
class Role:
    name: str
    permissions: FrozenSet[str]


@dataclass
class VODescriptor:
    name: str
    sites: List[str] = field(default_factory=list)
    users: Dict[str, List[str]] = field(default_factory=dict)
    packages: List[str] = field(default_factory=list)
    config_root: str = ""
    catalogue_node: str = ""
    partitions: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class TrustRelation:
    from_vo: str
    to_vo: str
    permissions: FrozenSet[str]
    scope: str


@dataclass(frozen=True)
class CrossVOCredential:
    credential_id: str
    principal: str
    origin_vo: str
    target_vo: str
    permissions: FrozenSet[str]
    scope: str
    expires_at: int
    signature: bytes = b""


@dataclass(frozen=True)
class NodeSpec:
    """Static description of one grid-box in a topology."""

    node_id: str
    site: str
    vo: str
    host_id: str = ""
    address: str = ""
    max_running: int = 4
    packages: Tuple[str, ...] = ("checksum", "histogram", "noop-cade")

    @property
    def se_id(self) -> str:
        return f"{self.node_id}:se"

    @property
    def ce_id(self) -> str:
        return f"{self.node_id}:ce"

    @property
    def host(self) -> str:
        return self.host_id or self.node_id
