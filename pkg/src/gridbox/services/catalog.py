"""Virtual file catalogue: logical namespace, replicas, schemas and queries."""

import re
import threading
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Set

from gridbox.errors import GridError
from gridbox.models import FileEntry, PhysicalLocation
from gridbox.services import catalog_query
from gridbox.services.catalog_query import COLUMN_TYPES, CatalogQuery
from gridbox.services.journal import CatalogJournal

_SEGMENT_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

Verifier = Callable[[PhysicalLocation], Optional[str]]


@dataclass(frozen=True)
class MetadataSchema:
    dir: str
    columns: Dict[str, str] = field(default_factory=dict)


def normalize_lfn(lfn: str) -> str:
    if not isinstance(lfn, str) or not lfn.startswith("/"):
        raise GridError("BadName", f"logical name must be absolute: {lfn!r}")
    if lfn == "/":
        return lfn
    segments = lfn[1:].split("/")
    for segment in segments:
        if segment in ("", ".", "..") or not _SEGMENT_RE.match(segment):
            raise GridError("BadName", f"invalid segment {segment!r} in {lfn!r}")
    return lfn


def parent_of(lfn: str) -> str:
    parent = lfn.rsplit("/", 1)[0]
    return parent or "/"


def ancestors(lfn: str) -> List[str]:
    """Return ``lfn`` and all of its ancestors, nearest first."""
    chain = [lfn]
    while chain[-1] != "/":
        chain.append(parent_of(chain[-1]))
    return chain


def is_under(lfn: str, prefix: str) -> bool:
    if prefix == "/":
        return True
    return lfn == prefix or lfn.startswith(prefix.rstrip("/") + "/")


class FileCatalog:
    """One node's catalogue: single writer, readers see committed state."""

    def __init__(
        self,
        logger,
        guid_factory: Optional[Callable[[], str]] = None,
        journal: Optional[CatalogJournal] = None,
    ):
        self.logger = logger
        self.guid_factory = guid_factory or (lambda: uuid.uuid4().hex)
        self.journal = journal
        self._lock = threading.RLock()
        self._dirs: Set[str] = {"/"}
        self._schemas: Dict[str, MetadataSchema] = {}
        self._versions: Dict[str, List[FileEntry]] = {}
        self._guids: Set[str] = set()
        self._replaying = False

    @classmethod
    def open(cls, state_dir: str, logger, guid_factory=None) -> "FileCatalog":
        """Restore a catalogue from its snapshot plus later journal records."""
        journal = CatalogJournal(state_dir, logger)
        catalog = cls(logger, guid_factory=guid_factory, journal=journal)
        catalog._replaying = True
        try:
            snapshot = journal.read_snapshot()
            after = 0
            if snapshot is not None:
                after = snapshot["seq"]
                catalog._dirs.update(snapshot["dirs"])
                for directory, columns in snapshot["schemas"].items():
                    catalog._schemas[directory] = MetadataSchema(directory, dict(columns))
                for data in snapshot["entries"]:
                    catalog._store(FileEntry.from_dict(data))
            for _, op, args in journal.records(after):
                catalog._apply(op, args)
        finally:
            catalog._replaying = False
        logger.info("Catalogue restored from %s (%s entries)", state_dir, len(catalog._versions))
        return catalog

    def snapshot(self):
        if self.journal is None:
            return
        with self._lock:
            state = {
                "dirs": sorted(self._dirs),
                "schemas": {d: dict(s.columns) for d, s in self._schemas.items()},
                "entries": [
                    entry.to_dict() for versions in self._versions.values() for entry in versions
                ],
            }
            self.journal.write_snapshot(state)

    # mutations

    def mkdir(self, lfn: str):
        lfn = normalize_lfn(lfn)
        with self._lock:
            if lfn in self._dirs:
                return
            if parent_of(lfn) not in self._dirs:
                raise GridError("ParentMissing", f"parent of {lfn} does not exist")
            if lfn in self._versions:
                raise GridError("AlreadyExists", f"{lfn} is a file")
            self._commit("mkdir", {"lfn": lfn})

    def ensure_dirs(self, lfn: str):
        """Create ``lfn`` and any missing ancestors."""
        lfn = normalize_lfn(lfn)
        for directory in reversed(ancestors(lfn)):
            self.mkdir(directory)

    def register_file(
        self,
        lfn: str,
        location: PhysicalLocation,
        size: int,
        checksum: str,
        owner_vo: str,
        home_node: str = "",
        guid: Optional[str] = None,
    ) -> str:
        lfn = normalize_lfn(lfn)
        with self._lock:
            if parent_of(lfn) not in self._dirs:
                raise GridError("ParentMissing", f"parent of {lfn} does not exist")
            if lfn in self._versions or lfn in self._dirs:
                raise GridError("AlreadyExists", f"{lfn} is already registered")
            if guid is None:
                guid = self.guid_factory()
                while guid in self._guids:
                    guid = self.guid_factory()
            elif guid in self._guids:
                raise GridError("AlreadyExists", f"guid {guid} is already registered")
            entry = FileEntry(
                guid=guid,
                lfn=lfn,
                size=size,
                checksum=checksum,
                owner_vo=owner_vo,
                version=1,
                replicas=[location],
                home_node=home_node,
            )
            self._commit("register", {"entry": entry.to_dict()})
            self.logger.debug("Registered %s as %s", lfn, guid)
            return guid

    def new_version(self, lfn: str, location: PhysicalLocation, size: int, checksum: str) -> int:
        with self._lock:
            latest = self._latest(lfn)
            entry = FileEntry(
                guid=latest.guid,
                lfn=latest.lfn,
                size=size,
                checksum=checksum,
                owner_vo=latest.owner_vo,
                version=latest.version + 1,
                replicas=[location],
                attrs=dict(latest.attrs),
                home_node=latest.home_node,
            )
            self._commit("version", {"entry": entry.to_dict()})
            return entry.version

    def add_replica(
        self,
        lfn: str,
        location: PhysicalLocation,
        verifier: Optional[Verifier] = None,
        version: Optional[int] = None,
    ):
        with self._lock:
            entry = self._entry(lfn, version)
            if location in entry.replicas:
                raise GridError("DuplicateReplica", f"{location.se_id} already holds {lfn}")
        if verifier is not None:
            actual = verifier(location)
            if actual != entry.checksum:
                raise GridError(
                    "ChecksumMismatch",
                    f"{lfn} at {location.se_id}: expected {entry.checksum}, got {actual}",
                )
        with self._lock:
            entry = self._entry(lfn, entry.version)
            if location in entry.replicas:
                raise GridError("DuplicateReplica", f"{location.se_id} already holds {lfn}")
            self._commit(
                "add_replica",
                {"lfn": lfn, "version": entry.version, "location": location.to_dict()},
            )

    def attach_schema(self, directory: str, columns: Mapping[str, str]):
        directory = normalize_lfn(directory)
        for name, column_type in columns.items():
            if column_type not in COLUMN_TYPES:
                raise GridError("TypeMismatch", f"column {name} has unknown type {column_type}")
        with self._lock:
            if directory not in self._dirs:
                raise GridError("NotFound", f"directory {directory} does not exist")
            existing = self._schemas.get(directory)
            if existing is not None:
                if existing.columns == dict(columns):
                    return
                raise GridError("SchemaConflict", f"{directory} already has a schema")
            for other in self._schemas:
                if is_under(directory, other) or is_under(other, directory):
                    raise GridError(
                        "SchemaConflict", f"{directory} overlaps the schema at {other}"
                    )
            self._commit("schema", {"dir": directory, "columns": dict(columns)})

    def set_attrs(self, lfn: str, values: Mapping[str, Any]):
        with self._lock:
            entry = self._latest(lfn)
            schema = self.schema_for(lfn)
            if schema is None:
                raise GridError("UnknownAttribute", f"no schema governs {lfn}")
            for name, value in values.items():
                column_type = schema.columns.get(name)
                if column_type is None:
                    raise GridError("UnknownAttribute", f"no column {name!r} at {schema.dir}")
                if not catalog_query.conforms(column_type, value):
                    raise GridError(
                        "TypeMismatch", f"{value!r} does not fit {column_type} column {name}"
                    )
            self._commit(
                "attrs", {"lfn": lfn, "version": entry.version, "attrs": dict(values)}
            )

    def unregister(self, lfn: str, version: Optional[int] = None):
        """Drop an entry (or one version of it); used to roll back failed ingests."""
        with self._lock:
            self._entry(lfn, version)
            self._commit("unregister", {"lfn": lfn, "version": version})

    def put_mirror(self, data: Dict[str, Any]):
        """Store a metadata copy of an entry governed by another node."""
        entry = FileEntry.from_dict(data)
        entry.mirror = True
        with self._lock:
            self.ensure_dirs(parent_of(normalize_lfn(entry.lfn)))
            self._commit("mirror", {"entry": entry.to_dict()})

    # reads

    def lookup(self, lfn: str, version: Optional[int] = None) -> FileEntry:
        with self._lock:
            entry = self._entry(lfn, version).copy()
        entry.replicas.sort()
        return entry

    def versions(self, lfn: str) -> List[int]:
        with self._lock:
            return [entry.version for entry in self._versions.get(lfn, [])]

    def exists(self, lfn: str) -> bool:
        with self._lock:
            return lfn in self._versions

    def is_dir(self, lfn: str) -> bool:
        with self._lock:
            return lfn in self._dirs

    def list_dir(self, lfn: str) -> List[str]:
        lfn = normalize_lfn(lfn)
        with self._lock:
            if lfn not in self._dirs:
                raise GridError("NotFound", f"directory {lfn} does not exist")
            names = set(self._dirs) | set(self._versions)
        return sorted(name for name in names if name != lfn and parent_of(name) == lfn)

    def schema_for(self, lfn: str) -> Optional[MetadataSchema]:
        with self._lock:
            for directory in ancestors(lfn):
                if directory in self._schemas:
                    return self._schemas[directory]
        return None

    def schemas(self) -> List[MetadataSchema]:
        with self._lock:
            return [self._schemas[d] for d in sorted(self._schemas)]

    def entries(self) -> Iterator[FileEntry]:
        """Latest version of every entry, in lfn order."""
        with self._lock:
            latest = [versions[-1].copy() for _, versions in sorted(self._versions.items())]
        yield from latest

    def find(self, prefix: str, query: CatalogQuery) -> List[str]:
        prefix = normalize_lfn(prefix)
        with self._lock:
            governing = self.schema_for(prefix)
            if governing is not None:
                applicable = [governing]
            else:
                applicable = [s for d, s in self._schemas.items() if is_under(d, prefix)]
            if not applicable:
                return []
            for schema in applicable:
                catalog_query.check_types(query, schema.columns)
            matches = [
                lfn
                for lfn, versions in self._versions.items()
                if is_under(lfn, prefix)
                and self.schema_for(lfn) is not None
                and catalog_query.evaluate(query, versions[-1].attrs)
            ]
        return sorted(matches)

    # internals

    def _latest(self, lfn: str) -> FileEntry:
        versions = self._versions.get(lfn)
        if not versions:
            raise GridError("NotFound", f"{lfn} is not registered")
        return versions[-1]

    def _entry(self, lfn: str, version: Optional[int]) -> FileEntry:
        if version is None:
            return self._latest(lfn)
        for entry in self._versions.get(lfn, []):
            if entry.version == version:
                return entry
        raise GridError("NotFound", f"{lfn} has no version {version}")

    def _store(self, entry: FileEntry):
        versions = self._versions.setdefault(entry.lfn, [])
        versions[:] = [item for item in versions if item.version != entry.version]
        versions.append(entry)
        versions.sort(key=lambda item: item.version)
        self._guids.add(entry.guid)

    def _commit(self, op: str, args: Dict[str, Any]):
        if self.journal is not None and not self._replaying:
            self.journal.append(op, args)
        self._apply(op, args)

    def _apply(self, op: str, args: Dict[str, Any]):
        if op == "mkdir":
            self._dirs.add(args["lfn"])
        elif op in ("register", "version", "mirror"):
            self._store(FileEntry.from_dict(args["entry"]))
        elif op == "add_replica":
            entry = self._entry(args["lfn"], args["version"])
            entry.replicas.append(PhysicalLocation.from_dict(args["location"]))
            entry.replicas.sort()
        elif op == "schema":
            self._schemas[args["dir"]] = MetadataSchema(args["dir"], dict(args["columns"]))
        elif op == "attrs":
            self._entry(args["lfn"], args["version"]).attrs.update(args["attrs"])
        elif op == "unregister":
            versions = self._versions.get(args["lfn"], [])
            if args.get("version") is None:
                versions = []
            else:
                versions = [item for item in versions if item.version != args["version"]]
            if versions:
                self._versions[args["lfn"]] = versions
            else:
                self._versions.pop(args["lfn"], None)
        else:
            raise GridError("JournalError", f"unknown catalogue operation {op!r}")
