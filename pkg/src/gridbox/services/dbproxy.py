"""The only remote entry point into a node's catalogue."""

from typing import Any, Callable, Dict, Mapping, Optional

from gridbox.errors import GridError
from gridbox.models import PhysicalLocation
from gridbox.services import catalog_query
from gridbox.services.catalog import FileCatalog
from gridbox.services.policy import AccessPolicy, AuthContext

ChangeHook = Callable[[str], None]
ReplicaVerifier = Callable[[PhysicalLocation], Optional[str]]

READ_STATEMENTS = ("lookup", "find", "list_dir", "versions")
WRITE_STATEMENTS = (
    "register",
    "add_replica",
    "set_attrs",
    "new_version",
    "unregister",
    "mirror.put",
    "mirror.drop",
)


def entry_row(entry) -> Dict[str, Any]:
    return {
        "guid": entry.guid,
        "lfn": entry.lfn,
        "owner_vo": entry.owner_vo,
        "attrs": dict(entry.attrs),
    }


class DatabaseProxy:
    def __init__(
        self,
        catalog: FileCatalog,
        policy: AccessPolicy,
        logger,
        replica_verifier: Optional[ReplicaVerifier] = None,
        on_change: Optional[ChangeHook] = None,
    ):
        self.catalog = catalog
        self.policy = policy
        self.logger = logger
        self.replica_verifier = replica_verifier
        self.on_change = on_change

    def execute(self, ctx: AuthContext, stmt: Mapping[str, Any]) -> Dict[str, Any]:
        kind = stmt.get("stmt")
        if kind in READ_STATEMENTS:
            path = stmt.get("prefix") if kind == "find" else stmt.get("lfn")
            self.policy.authorize(ctx, "read-meta", path)
            return getattr(self, "_" + kind)(stmt)
        if kind in WRITE_STATEMENTS:
            self.policy.require_host(ctx)
            result = getattr(self, "_" + kind.replace(".", "_"))(stmt)
            if self.on_change is not None and kind in ("register", "add_replica", "set_attrs"):
                self.on_change(stmt["lfn"])
            return result
        raise GridError("NoSuchOperation", f"unknown catalogue statement {kind!r}")

    # reads

    def _lookup(self, stmt) -> Dict[str, Any]:
        entry = self.catalog.lookup(stmt["lfn"], stmt.get("version"))
        return {"entry": entry.to_dict()}

    def _versions(self, stmt) -> Dict[str, Any]:
        return {"versions": self.catalog.versions(stmt["lfn"])}

    def _find(self, stmt) -> Dict[str, Any]:
        query = catalog_query.from_dict(stmt["query"])
        lfns = self.catalog.find(stmt["prefix"], query)
        rows = [entry_row(self.catalog.lookup(lfn)) for lfn in lfns]
        return {"entries": rows}

    def _list_dir(self, stmt) -> Dict[str, Any]:
        return {"names": self.catalog.list_dir(stmt["lfn"])}

    # writes

    def _register(self, stmt) -> Dict[str, Any]:
        lfn = stmt["lfn"]
        self.catalog.ensure_dirs(lfn.rsplit("/", 1)[0] or "/")
        guid = self.catalog.register_file(
            lfn,
            PhysicalLocation.from_dict(stmt["location"]),
            int(stmt["size"]),
            stmt["checksum"],
            stmt["owner_vo"],
            home_node=stmt.get("home_node", ""),
            guid=stmt.get("guid"),
        )
        return {"guid": guid}

    def _add_replica(self, stmt) -> Dict[str, Any]:
        self.catalog.add_replica(
            stmt["lfn"],
            PhysicalLocation.from_dict(stmt["location"]),
            verifier=self.replica_verifier,
            version=stmt.get("version"),
        )
        return {}

    def _set_attrs(self, stmt) -> Dict[str, Any]:
        self.catalog.set_attrs(stmt["lfn"], stmt["attrs"])
        return {}

    def _new_version(self, stmt) -> Dict[str, Any]:
        version = self.catalog.new_version(
            stmt["lfn"],
            PhysicalLocation.from_dict(stmt["location"]),
            int(stmt["size"]),
            stmt["checksum"],
        )
        return {"version": version}

    def _unregister(self, stmt) -> Dict[str, Any]:
        self.catalog.unregister(stmt["lfn"], stmt.get("version"))
        return {}

    def _mirror_put(self, stmt) -> Dict[str, Any]:
        self.catalog.put_mirror(stmt["entry"])
        return {}

    def _mirror_drop(self, stmt) -> Dict[str, Any]:
        if self.catalog.exists(stmt["lfn"]):
            self.catalog.unregister(stmt["lfn"])
        return {}
