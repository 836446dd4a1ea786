"""The grid-box: one node's service stack behind a single RPC dispatch."""

import base64
import binascii
import logging
from typing import Any, Callable, Dict, List, Mapping, Optional

from .constants import (
    ALGORITHM_ROOT,
    DATA_ROOT,
    DEFAULT_FTD_CHUNK_BYTES,
    DEFAULT_MAX_PORTALS_PER_USER,
    DEFAULT_SE_CACHE_BYTES,
    DEFAULT_SESSION_TTL_SECONDS,
)
from .errors import GridError
from .errors_catalog import grid_error
from .models import Credentials, FileEntry, PhysicalLocation, SessionToken, TransferRequest
from .services import dicom_codec as codec
from .services.algorithms import AlgorithmRegistry
from .services.anonymizer import AnonymizationKey, anonymize
from .services.audit import GOVERNANCE_STEP, AuditLog
from .services.catalog import FileCatalog, is_under, normalize_lfn, parent_of
from .services.clock import SystemClock, SystemEntropy
from .services.computing import ComputingElement
from .services.config_tree import ConfigTree
from .services.dbproxy import DatabaseProxy
from .services.federation import QueryFederator
from .services.jdl import parse_jdl, render_jdl
from .services.job_manager import JobManager
from .services.policy import AccessPolicy, AuthContext
from .services.portal import AuthenticationService, PortalFactory
from .services.query_language import parse_query
from .services.router import Router
from .services.storage import StorageElement, sha256_hex
from .services.structured import StructuredRecord, to_structured
from .services.topology import (
    ForeignGridAdapter,
    GovernanceReport,
    NodeSnapshot,
    Topology,
    audit_governance,
)
from .services.transfer import FileTransferService
from .services.vo import encode_credential
from .services.wire import HostKeyring

logger = logging.getLogger("gridbox")

IMAGE_SCHEMA = {
    "birth_year": "INT",
    "laterality": "TEXT",
    "view": "TEXT",
    "study_date": "DATE",
    "site": "TEXT",
    "modality": "TEXT",
    "pseudonym": "TEXT",
}

RpcHandler = Callable[[AuthContext, Dict[str, Any], Dict[str, str]], Any]
PortalHandler = Callable[[SessionToken, Dict[str, Any]], Any]

_UNREACHABLE = frozenset({"NoRoute", "Timeout", "ChannelClosed"})


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str, what: str = "payload") -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError, TypeError) as exc:
        raise GridError("MalformedPayload", f"{what} is not base64") from exc


def image_attrs(record: StructuredRecord, site: str) -> Dict[str, Any]:
    """Catalogue attributes of an anonymized record."""
    birth = str(record.get("patient.birth_date", ""))
    study = str(record.get("study.date", ""))
    return {
        "birth_year": int(birth[:4]),
        "laterality": str(record.get("series.laterality", "")),
        "view": str(record.get("series.view", "")),
        "study_date": f"{study[:4]}-{study[4:6]}-{study[6:8]}",
        "site": str(record.get("study.site") or site),
        "modality": str(record.get("series.modality", "")),
        "pseudonym": str(record.get("patient.id", "")),
    }


class GridBox:
    def __init__(
        self,
        node_id: str,
        topology: Topology,
        keyring: HostKeyring,
        transport,
        clock=None,
        entropy=None,
        config_tree: Optional[ConfigTree] = None,
        state_dir: Optional[str] = None,
        storage_root: Optional[str] = None,
        audit_path: Optional[str] = None,
        events=None,
        concurrent: bool = False,
    ):
        self.node = topology.node(node_id)
        self.node_id = node_id
        self.topology = topology
        self.keyring = keyring
        self.transport = transport
        self.clock = clock or SystemClock()
        self.entropy = entropy or SystemEntropy()
        self.config_tree = config_tree or ConfigTree()
        self.events = events
        self.logger = logger.getChild(node_id)

        self.storage_root = storage_root
        self.cache_bytes = self._tunable("se_cache_bytes", DEFAULT_SE_CACHE_BYTES)
        if state_dir:
            self.catalog = FileCatalog.open(
                state_dir, self.logger.getChild("catalog"), guid_factory=self._new_guid
            )
        else:
            self.catalog = FileCatalog(self.logger.getChild("catalog"), guid_factory=self._new_guid)
        self.catalog.ensure_dirs(DATA_ROOT)
        self.catalog.attach_schema(DATA_ROOT, IMAGE_SCHEMA)
        self.catalog.ensure_dirs(ALGORITHM_ROOT)

        self.storages: Dict[str, StorageElement] = {}
        self.storage = self._new_storage(self.node.se_id)
        self.registry = AlgorithmRegistry(self.logger.getChild("algorithms"))
        self.computing: Dict[str, ComputingElement] = {
            self.node.ce_id: ComputingElement(
                self.node.ce_id, self.storage, self.registry, self.logger.getChild("ce")
            )
        }

        self.audit = AuditLog(self.clock, audit_path)
        self.policy = AccessPolicy(self.node, topology)
        self.factory = PortalFactory(
            node_id, self._tunable("max_portals", DEFAULT_MAX_PORTALS_PER_USER)
        )
        self.auth = AuthenticationService(
            self.node,
            topology,
            keyring,
            self.factory,
            self.audit,
            self.clock,
            self.entropy,
            self.logger.getChild("auth"),
            session_ttl=self._tunable("session_ttl_s", DEFAULT_SESSION_TTL_SECONDS),
        )
        self.router = Router(
            self.node, topology, transport, self.handle_rpc, self.logger, concurrent=concurrent
        )
        self.dbproxy = DatabaseProxy(
            self.catalog,
            self.policy,
            self.logger.getChild("dbproxy"),
            replica_verifier=self._verify_replica,
            on_change=self._catalog_changed,
        )
        self.ftd = FileTransferService(
            self.node,
            topology,
            keyring,
            self.storage_for,
            self.router,
            self.policy,
            self.logger.getChild("ftd"),
            chunk_bytes=self._tunable("ftd_chunk_bytes", DEFAULT_FTD_CHUNK_BYTES),
        )
        self.federator = QueryFederator(
            topology, self.router, self.entropy, self.logger.getChild("federation")
        )
        self.jobs = JobManager(
            node_id,
            topology,
            self.router,
            self.clock,
            self.logger.getChild("jobs"),
            algorithm_known=lambda name: self.catalog.exists(f"{ALGORITHM_ROOT}/{name}"),
            on_event=self._event,
        )
        site_master = b"anonymization|" + self.node.site.encode("utf-8") + b"|"
        self.anon_key = AnonymizationKey.derive(site_master + keyring.secret(self.node.host))

        self._rpc: Dict[str, RpcHandler] = {
            "echo": lambda ctx, args, headers: args,
            "relay.forward": self._rpc_relay,
            "dbproxy.execute": lambda ctx, args, headers: self.dbproxy.execute(ctx, args),
            "se.get": self._rpc_se_get,
            "se.stat": self._rpc_se_stat,
            "se.retrieve": self._rpc_se_retrieve,
            "ftd.transfer": self._rpc_ftd_transfer,
            "ftd.receive": lambda ctx, args, headers: self.ftd.receive(ctx, args, headers),
            "ftd.abort": self._rpc_ftd_abort,
            "ce.execute": self._rpc_ce_execute,
            "jobs.submit": self._rpc_jobs_submit,
            "jobs.status": self._rpc_jobs_status,
            "jobs.kill": self._rpc_jobs_kill,
            "jobs.register_algorithm": self._rpc_register_algorithm,
            "portal.login": self._rpc_login,
            "portal.dispatch": self._rpc_dispatch,
            "portal.logout": self._rpc_logout,
            "governance.snapshot": self._rpc_snapshot,
        }
        self._portal: Dict[str, PortalHandler] = {
            "mi.add": self.mi_add,
            "mi.retrieve": self.mi_retrieve,
            "mi.update": self.mi_update,
            "mi.query": self.mi_query,
            "mi.addAlgorithm": self.mi_add_algorithm,
            "mi.executeAlgorithm": self.mi_execute_algorithm,
            "job.status": self.job_status,
            "job.kill": self.job_kill,
            "admin.vo_create": self.admin_vo_create,
            "admin.site_add": self.admin_site_add,
            "admin.user_add": self.admin_user_add,
            "admin.trust_grant": self.admin_trust_grant,
            "admin.trust_revoke": self.admin_trust_revoke,
            "admin.mode_set": self.admin_mode_set,
            "admin.audit": self.admin_audit,
            "admin.supervo_attach": self.admin_supervo_attach,
            "admin.foreign_attach": self.admin_foreign_attach,
            "admin.foreign_detach": self.admin_foreign_detach,
        }

    @property
    def vo_service(self):
        return self.topology.vo_service

    @property
    def portal_operations(self) -> List[str]:
        return sorted(self._portal)

    # lifecycle

    def listen(self, address: Optional[str] = None):
        if address is None:
            return self.transport.listen(self.node_id, self.node.host, self.handle_rpc)
        return self.transport.listen(self.node_id, self.node.host, self.handle_rpc, address)

    def close(self):
        self.router.close()
        self.catalog.snapshot()

    def tick(self, kind: str = "all"):
        """Run one job-system cycle (``broker``, ``optimizer``, ``transfers``, ``ce``)."""
        if kind == "all":
            return self.jobs.tick_all()
        cycle = getattr(self.jobs, f"tick_{kind}", None)
        if cycle is None:
            raise GridError("NoSuchOperation", f"no {kind!r} cycle")
        return cycle()

    # RPC surface

    def handle_rpc(
        self, op: str, args: Any, auth: Mapping[str, Any], headers: Mapping[str, str]
    ) -> Any:
        handler = self._rpc.get(op)
        if handler is None:
            raise GridError("NoSuchOperation", f"{self.node_id} offers no {op!r}")
        if args is None:
            args = {}
        if not isinstance(args, dict):
            raise GridError("MalformedPayload", f"{op} expects a mapping of arguments")
        return handler(AuthContext.from_rpc(auth), args, dict(headers or {}))

    def _rpc_relay(self, ctx: AuthContext, args: Dict[str, Any], headers: Dict[str, str]) -> Any:
        peer = self.policy.peer_node(ctx)
        if peer is None or self.node_id != self.topology.central_node:
            raise GridError("NotAuthorized", f"{self.node_id} relays only for grid-box peers")
        target = self.topology.node(args["node_id"])
        if target.vo == peer.vo:
            raise GridError("NotAuthorized", "relaying is reserved for traffic between VOs")
        if ctx.principal and ctx.principal.rpartition("@")[2] != peer.vo:
            raise GridError(
                "NotAuthorized", f"{peer.node_id} ({peer.vo}) may not relay for {ctx.principal}"
            )
        self._event("relay", f"{peer.node_id}>{target.node_id} {args['op']}")
        forwarded = AuthContext(principal=ctx.principal, credential=ctx.credential).to_rpc()
        return self.router.call(
            target.node_id, args["op"], args.get("args"), forwarded, args.get("headers")
        )

    def _rpc_se_get(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, str]:
        self.policy.require_host(ctx)
        return {"data": b64(self.storage_for(args["se_id"]).get(args["object_key"]))}

    def _rpc_se_stat(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, Any]:
        self.policy.require_host(ctx)
        storage = self.storage_for(args["se_id"])
        if not storage.holds(args["object_key"]):
            raise GridError("NotFound", f"{args['se_id']} holds no {args['object_key']}")
        meta = storage.stat(args["object_key"])
        return {"checksum": meta.checksum, "size": meta.size, "owner_vo": meta.owner_vo}

    def _rpc_se_retrieve(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, Any]:
        lfn = normalize_lfn(args["lfn"])
        self.policy.authorize(ctx, "read-image", lfn)
        entry = self.catalog.lookup(lfn, args.get("version"))
        data = self._fetch(entry)
        if ctx.principal and ctx.principal.rpartition("@")[2] != self.node.vo:
            self.audit.record(
                GOVERNANCE_STEP,
                "-",
                "se",
                f"cross-vo read {lfn} v{entry.version} by {ctx.principal} via {ctx.host}",
            )
        return {
            "data": b64(data),
            "guid": entry.guid,
            "lfn": entry.lfn,
            "version": entry.version,
            "checksum": entry.checksum,
            "owner_vo": entry.owner_vo,
        }

    def _rpc_ftd_transfer(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict:
        return self.ftd.transfer(ctx, TransferRequest.from_dict(args["request"]))

    def _rpc_ftd_abort(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict:
        self.ftd.abort(ctx, args["transfer_id"])
        return {}

    def _rpc_ce_execute(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, Any]:
        self.policy.require_host(ctx)
        ce = self.computing_for(args["ce_id"])
        descriptor = parse_jdl(args["jdl_text"])
        record = ce.translate(
            args["task_id"], descriptor, lambda lfn: self._locate(lfn, ce.storage.se_id)
        )
        vo = args.get("vo") or self.node.vo

        def register(lfn: str, location: PhysicalLocation, size: int, checksum: str):
            home = self.topology.home_node(lfn)
            self.router.call(
                home.node_id,
                "dbproxy.execute",
                {
                    "stmt": "register",
                    "lfn": lfn,
                    "location": location.to_dict(),
                    "size": size,
                    "checksum": checksum,
                    "owner_vo": vo,
                    "home_node": home.node_id,
                },
            )

        result = ce.execute(record, vo, register)
        return {
            "result_lfn": result.output_lfn,
            "checksum": result.checksum,
            "object_key": result.object_key,
        }

    def _services_jobs(self) -> JobManager:
        services = self.topology.services_node(self.node.vo)
        if services != self.node_id:
            raise GridError("NoSuchOperation", f"the {self.node.vo} job system runs on {services}")
        return self.jobs

    def _rpc_jobs_submit(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, str]:
        jobs = self._services_jobs()
        owner = self.policy.authorize(ctx, "execute")
        return {"task_id": jobs.submit(args["jdl_text"], owner=owner, vo=self.node.vo)}

    def _rpc_jobs_status(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict:
        jobs = self._services_jobs()
        self.policy.authorize(ctx, "read-meta")
        return jobs.status(args["task_id"]).to_dict()

    def _rpc_jobs_kill(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict:
        jobs = self._services_jobs()
        identity = self.policy.authorize(ctx, "execute")
        task = jobs.status(args["task_id"])
        if task.owner != identity and not self.vo_service.has_permission(identity, "admin"):
            raise grid_error("NotAuthorized", principal=identity, action=f"kill {task.task_id}")
        jobs.kill(task.task_id)
        return jobs.status(task.task_id).to_dict()

    def _rpc_register_algorithm(
        self, ctx: AuthContext, args: Dict[str, Any], headers
    ) -> Dict[str, Any]:
        self._services_jobs()
        self.policy.authorize(ctx, "execute")
        name = args["name"]
        artifact = unb64(args["artifact"], "artifact")
        self.registry.check_artifact(name, artifact, args["checksum"])
        lfn = f"{ALGORITHM_ROOT}/{name}"
        versions = self.catalog.versions(lfn)
        if versions and self.catalog.lookup(lfn).checksum == args["checksum"]:
            return {"lfn": lfn, "version": versions[-1]}

        object_key = f"algorithm-{name}-v{len(versions) + 1}"
        checksum = self.storage.put(object_key, artifact, self.node.vo, provenance="algorithm")
        location = PhysicalLocation(self.node.se_id, object_key)
        try:
            if versions:
                version = self.catalog.new_version(lfn, location, len(artifact), checksum)
            else:
                self.catalog.register_file(
                    lfn, location, len(artifact), checksum, self.node.vo, home_node=self.node_id
                )
                version = 1
        except GridError:
            self.storage.delete(object_key)
            raise
        self.logger.info("Registered algorithm %s version %s", name, version)
        return {"lfn": lfn, "version": version}

    def _rpc_login(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, Any]:
        creds = Credentials(
            str(args.get("principal", "")),
            str(args.get("mechanism", "PWD")),
            str(args.get("secret", "")),
        )
        session = self.auth.authenticate(creds, peer_host=ctx.host)
        return {
            "token": session.token,
            "principal": session.principal,
            "session_id": session.session_id,
            "portal": str(session.portal),
            "expires_at": session.expires_at.strftime("%Y-%m-%dT%H:%M:%SZ"),
        }

    def _rpc_dispatch(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Any:
        return self.portal_dispatch(
            str(args.get("token", "")), str(args.get("op", "")), args.get("args") or {}
        )

    def _rpc_logout(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict:
        self.auth.logout(str(args.get("token", "")))
        return {}

    def _rpc_snapshot(self, ctx: AuthContext, args: Dict[str, Any], headers) -> Dict[str, Any]:
        if self.policy.peer_node(ctx) is None:
            raise GridError("NotAuthorized", "governance snapshots are for grid-box peers only")
        return self.snapshot().to_dict()

    # portal

    def authenticate(self, creds: Credentials, peer_host: Optional[str] = None) -> SessionToken:
        return self.auth.authenticate(creds, peer_host=peer_host)

    def portal_dispatch(self, token: str, op: str, args: Dict[str, Any]) -> Any:
        """Walk one request through portal and middleware, recording steps 7-10."""
        session = self.auth.session(token)
        handler = self._portal.get(op)
        if handler is None:
            raise GridError("NoSuchOperation", f"the portal offers no {op!r}")
        session_id = session.session_id
        self.audit.record(7, session_id, "portal", f"request {op}")
        self.audit.record(8, session_id, "middleware", f"forward {op}")
        try:
            result = handler(session, dict(args))
        except GridError as exc:
            self.audit.record(9, session_id, "middleware", f"error {exc.code}")
            self.audit.record(10, session_id, "portal", f"return {op} error")
            raise
        self.audit.record(9, session_id, "middleware", f"response {op}")
        self.audit.record(10, session_id, "portal", f"return {op}")
        return result

    # MI operations

    def mi_add(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, str]:
        lfn = normalize_lfn(args["lfn"])
        self._require(session, "write", lfn)
        self._require_governed_here(session, lfn)
        stored, attrs = self._prepare(unb64(args["data"], "image"))
        if self.catalog.exists(lfn):
            raise GridError("AlreadyExists", f"{lfn} is already registered")

        guid = self._new_guid()
        self.catalog.ensure_dirs(parent_of(lfn))
        checksum = self.storage.put(guid, stored, self.node.vo)
        try:
            self.catalog.register_file(
                lfn,
                PhysicalLocation(self.node.se_id, guid),
                len(stored),
                checksum,
                self.node.vo,
                home_node=self.node_id,
                guid=guid,
            )
            self.catalog.set_attrs(lfn, attrs)
            self._mirror(lfn)
        except GridError as exc:
            self.logger.warning("Ingest of %s rolled back: %s", lfn, exc)
            self._rollback(lfn, guid)
            raise
        self.logger.info("Ingested %s as %s", lfn, guid)
        return {"guid": guid, "lfn": lfn}

    def mi_retrieve(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        lfn = normalize_lfn(args["lfn"])
        version = args.get("version")
        home = self.topology.home_node(lfn)
        auth = self._principal_auth(session, home.vo, "read-image", lfn)
        if home.vo == session.vo and home.node_id != self.node_id:
            self._require(session, "read-image", lfn)
            entry = self._nearest_entry(lfn, version, home.node_id, auth)
            data = self._read_nearby(entry) if entry is not None else None
            if data is not None:
                return {
                    "data": b64(data),
                    "guid": entry.guid,
                    "lfn": entry.lfn,
                    "version": entry.version,
                    "checksum": entry.checksum,
                    "owner_vo": entry.owner_vo,
                }
        result = self.router.call(
            home.node_id, "se.retrieve", {"lfn": lfn, "version": version}, auth
        )
        if home.node_id != self.node_id:
            self.storage.cache_put(
                f"{result['guid']}~v{result['version']}",
                unb64(result["data"], "image"),
                result["owner_vo"],
            )
        return result

    def mi_update(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, int]:
        lfn = normalize_lfn(args["lfn"])
        self._require(session, "write", lfn)
        self._require_governed_here(session, lfn)
        entry = self.catalog.lookup(lfn)
        if entry.owner_vo != session.vo:
            raise grid_error("NotAuthorized", principal=session.principal, action=f"update {lfn}")
        stored, attrs = self._prepare(unb64(args["data"], "image"))

        next_version = entry.version + 1
        object_key = f"{entry.guid}~v{next_version}"
        checksum = self.storage.put(object_key, stored, self.node.vo)
        try:
            version = self.catalog.new_version(
                lfn, PhysicalLocation(self.node.se_id, object_key), len(stored), checksum
            )
            self.catalog.set_attrs(lfn, attrs)
            self._mirror(lfn)
        except GridError as exc:
            self.logger.warning("Update of %s rolled back: %s", lfn, exc)
            self._rollback(lfn, object_key, next_version)
            raise
        return {"version": version}

    def mi_query(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        ast = parse_query(str(args.get("text", "")))
        query_year = int(args.get("query_year") or self.clock.now().year)
        root = args.get("supervo")
        if root:
            leaves = self.topology.supervo_leaves(str(root))
            plan = self.federator.plan(ast, session.principal, query_year, targets=leaves)
        else:
            plan = self.federator.plan(ast, session.principal, query_year)
        for leg in plan.legs:
            if leg.credential is not None:
                self.audit.record(
                    GOVERNANCE_STEP,
                    session.session_id,
                    "vo",
                    f"cross-vo read-meta {leg.prefix} {plan.origin_vo}->{leg.target_vo}",
                )
        return self.federator.execute_plan(plan).to_dict()

    def mi_add_algorithm(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "execute")
        services = self.topology.services_node(session.vo)
        return self.router.call(
            services,
            "jobs.register_algorithm",
            {"name": args["name"], "artifact": args["artifact"], "checksum": args["checksum"]},
            {"principal": session.principal},
        )

    def mi_execute_algorithm(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, str]:
        self._require(session, "execute")
        name = str(args["name"])
        inputs = [normalize_lfn(lfn) for lfn in args.get("inputs") or []]
        output = normalize_lfn(args["output"])
        auth = {"principal": session.principal}
        for lfn in inputs:
            home = self.topology.home_node(lfn)
            if home.vo != session.vo:
                raise grid_error("NotAuthorized", principal=session.principal, action=f"read {lfn}")
            self.router.call(home.node_id, "dbproxy.execute", {"stmt": "lookup", "lfn": lfn}, auth)
        if self.topology.home_node(output).vo != session.vo:
            raise grid_error("NotAuthorized", principal=session.principal, action=f"write {output}")

        jdl_text = render_jdl(name, inputs, output, requirements=f'packages CONTAINS "{name}"')
        services = self.topology.services_node(session.vo)
        return self.router.call(services, "jobs.submit", {"jdl_text": jdl_text}, auth)

    def job_status(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        services = self.topology.services_node(session.vo)
        return self.router.call(
            services, "jobs.status", {"task_id": args["task_id"]}, {"principal": session.principal}
        )

    def job_kill(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        services = self.topology.services_node(session.vo)
        return self.router.call(
            services, "jobs.kill", {"task_id": args["task_id"]}, {"principal": session.principal}
        )

    # administration

    def admin_vo_create(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        descriptor = self.vo_service.vo_create(
            str(args["name"]), packages=args.get("packages") or ()
        )
        return {"vo": descriptor.name}

    def admin_site_add(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        self.vo_service.vo_add_site(str(args["vo"]), str(args["site"]))
        return {"vo": args["vo"], "site": args["site"]}

    def admin_user_add(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        principal = str(args["principal"])
        self.vo_service.vo_add_user(
            principal.rpartition("@")[2],
            principal,
            args.get("roles") or [],
            password=args.get("password"),
        )
        return {"principal": principal}

    def admin_trust_grant(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        from_vo, to_vo = str(args["from_vo"]), str(args["to_vo"])
        self._require_trust_owner(session, to_vo)
        self.vo_service.trust_grant(
            from_vo, to_vo, args.get("permissions") or [], str(args.get("scope", DATA_ROOT))
        )
        self.audit.record(
            GOVERNANCE_STEP, session.session_id, "vo", f"trust grant {from_vo}->{to_vo}"
        )
        return {"from_vo": from_vo, "to_vo": to_vo}

    def admin_trust_revoke(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        from_vo, to_vo = str(args["from_vo"]), str(args["to_vo"])
        self._require_trust_owner(session, to_vo)
        self.vo_service.trust_revoke(from_vo, to_vo)
        self.audit.record(
            GOVERNANCE_STEP, session.session_id, "vo", f"trust revoke {from_vo}->{to_vo}"
        )
        return {"from_vo": from_vo, "to_vo": to_vo}

    def admin_mode_set(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        mode = str(args["mode"])
        self.topology.set_mode(mode, live_sessions=self.auth.live_sessions(exclude=session.token))
        if mode == "P1":
            central = self.vo_service.descriptor(self.topology.central_vo)
            central.catalogue_node = self.topology.central_node
        return {"mode": mode}

    def admin_audit(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        report = self.governance_audit()
        self.audit.record(
            GOVERNANCE_STEP,
            session.session_id,
            "governance",
            f"audit violations={len(report.violations)} unreachable={len(report.unreachable)}",
        )
        return report.to_dict()

    def admin_supervo_attach(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        self.topology.supervo_attach(str(args["parent"]), str(args["child"]))
        return {"parent": args["parent"], "child": args["child"]}

    def admin_foreign_attach(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        adapter = ForeignGridAdapter(
            grid_id=str(args["grid_id"]),
            host_vo=str(args.get("host_vo") or session.vo),
            gateway_node=str(args.get("gateway") or self.node_id),
            max_running=int(args.get("max_running", 8)),
            packages=tuple(args.get("packages") or ForeignGridAdapter.packages),
        )
        self.topology.foreign_attach(adapter)
        return {"grid_id": adapter.grid_id, "ce_id": adapter.ce_id, "se_id": adapter.se_id}

    def admin_foreign_detach(self, session: SessionToken, args: Dict[str, Any]) -> Dict[str, Any]:
        self._require(session, "admin")
        self.topology.foreign_detach(str(args["grid_id"]))
        return {"grid_id": args["grid_id"]}

    # governance

    def snapshot(self) -> NodeSnapshot:
        objects: List[Dict[str, Any]] = []
        for se_id in sorted(self.storages):
            objects.extend(self.storages[se_id].snapshot())
        entries = [entry.to_dict() for entry in self.catalog.entries()]
        return NodeSnapshot(self.node_id, self.node.vo, entries, objects)

    def governance_audit(self) -> GovernanceReport:
        snapshots: Dict[str, NodeSnapshot] = {}
        unreachable: List[str] = []
        for node_id in self.topology.node_ids():
            try:
                snapshots[node_id] = NodeSnapshot.from_dict(
                    self.router.call(node_id, "governance.snapshot", {})
                )
            except GridError as exc:
                self.logger.warning("Governance snapshot of %s failed: %s", node_id, exc)
                unreachable.append(node_id)
        return audit_governance(self.topology, snapshots, unreachable)

    # storage and computing elements

    def storage_for(self, se_id: str) -> StorageElement:
        storage = self.storages.get(se_id)
        if storage is not None:
            return storage
        adapter = self._hosted_adapter(se_id)
        if adapter is None:
            raise GridError("NotFound", f"{self.node_id} hosts no storage element {se_id}")
        return self._new_storage(adapter.se_id)

    def computing_for(self, ce_id: str) -> ComputingElement:
        ce = self.computing.get(ce_id)
        if ce is not None:
            return ce
        adapter = self._hosted_adapter(ce_id)
        if adapter is None:
            raise GridError("NotFound", f"{self.node_id} hosts no computing element {ce_id}")
        ce = ComputingElement(
            adapter.ce_id,
            self.storage_for(adapter.se_id),
            self.registry,
            self.logger.getChild(adapter.grid_id),
        )
        self.computing[ce_id] = ce
        return ce

    def _hosted_adapter(self, element_id: str) -> Optional[ForeignGridAdapter]:
        adapter = self.topology.foreign.get(element_id.partition(":")[0])
        if adapter is None or adapter.gateway_node != self.node_id:
            return None
        return adapter

    def _new_storage(self, se_id: str) -> StorageElement:
        storage = StorageElement(
            se_id,
            self.logger.getChild("se"),
            root=self.storage_root,
            cache_bytes=self.cache_bytes,
        )
        self.storages[se_id] = storage
        return storage

    # internals

    def _tunable(self, key: str, default: int) -> int:
        return self.config_tree.get_int(self.node.vo, self.node.site, self.node.host, key, default)

    def _new_guid(self) -> str:
        return self.entropy.token_bytes(16).hex()

    def _event(self, kind: str, detail: str):
        if self.events is not None:
            self.events.record(self.node_id, kind, detail)

    def _require(self, session: SessionToken, permission: str, path: str = ""):
        if not self.vo_service.has_permission(session.principal, permission):
            action = f"{permission} {path}".rstrip()
            raise grid_error("NotAuthorized", principal=session.principal, action=action)

    def _require_governed_here(self, session: SessionToken, lfn: str):
        home = self.topology.home_node(lfn)
        if home.node_id != self.node_id or session.vo != self.node.vo:
            raise grid_error(
                "NotAuthorized",
                principal=session.principal,
                action=f"write {lfn} at {self.node_id} (governed by {home.node_id})",
            )

    def _require_trust_owner(self, session: SessionToken, to_vo: str):
        self._require(session, "admin")
        if session.vo not in (to_vo, self.topology.central_vo):
            raise grid_error(
                "NotAuthorized", principal=session.principal, action=f"grant access to {to_vo}"
            )

    def _principal_auth(
        self, session: SessionToken, target_vo: str, permission: str, scope: str
    ) -> Dict[str, Any]:
        auth: Dict[str, Any] = {"principal": session.principal}
        if target_vo == session.vo:
            return auth
        try:
            credential = self.vo_service.voms_authorize(
                session.principal, session.vo, target_vo, permission, scope
            )
        except GridError as exc:
            if exc.code == "Denied":
                raise GridError("NotAuthorized", exc.message) from exc
            raise
        auth["credential"] = encode_credential(credential)
        self.audit.record(
            GOVERNANCE_STEP,
            session.session_id,
            "vo",
            f"cross-vo {permission} {scope} {session.vo}->{target_vo}",
        )
        return auth

    def _prepare(self, data: bytes):
        """Parse, validate and anonymize an upload; returns stored bytes and attributes."""
        ds = codec.parse(data)
        report = codec.validate(ds)
        if not report.ok:
            raise GridError("ValidationFailed", report.summary())
        anonymized = anonymize(ds, self.anon_key, self.entropy.token_bytes)
        stored = codec.serialize(anonymized)
        return stored, image_attrs(to_structured(anonymized), self.node.site)

    def _rollback(self, lfn: str, object_key: str, version: Optional[int] = None):
        if self.catalog.exists(lfn) and (version is None or version in self.catalog.versions(lfn)):
            self.catalog.unregister(lfn, version)
        if self.storage.holds(object_key):
            self.storage.delete(object_key)

    def _mirror(self, lfn: str):
        if self.topology.mode != "P1" or self.node_id == self.topology.central_node:
            return
        entry = self.catalog.lookup(lfn)
        self.router.call(
            self.topology.central_node,
            "dbproxy.execute",
            {"stmt": "mirror.put", "entry": entry.to_dict()},
        )

    def _catalog_changed(self, lfn: str):
        if not is_under(lfn, DATA_ROOT) or not self.catalog.exists(lfn):
            return
        try:
            self._mirror(lfn)
        except GridError as exc:
            self.logger.warning("Mirroring %s to the central catalogue failed: %s", lfn, exc)

    def _verify_replica(self, location: PhysicalLocation) -> Optional[str]:
        try:
            node_id = self.topology.node_for_se(location.se_id)
            stat = self.router.call(node_id, "se.stat", location.to_dict())
        except GridError as exc:
            self.logger.info("Replica %s could not be verified: %s", location, exc)
            return None
        return stat.get("checksum")

    def _locate(self, lfn: str, se_id: str) -> Optional[str]:
        try:
            home = self.topology.home_node(lfn)
            response = self.router.call(
                home.node_id, "dbproxy.execute", {"stmt": "lookup", "lfn": lfn}
            )
        except GridError as exc:
            self.logger.info("Input %s could not be located: %s", lfn, exc)
            return None
        for replica in FileEntry.from_dict(response["entry"]).replicas:
            if replica.se_id == se_id:
                return replica.object_key
        return None

    def _nearest_entry(
        self, lfn: str, version: Optional[int], home_id: str, auth: Dict[str, Any]
    ) -> Optional[FileEntry]:
        """The entry from its home catalogue, or from the P1 central mirror."""
        sources = [home_id]
        if self.topology.mode == "P1" and self.topology.central_node != home_id:
            sources.append(self.topology.central_node)
        for node_id in sources:
            try:
                response = self.router.call(
                    node_id,
                    "dbproxy.execute",
                    {"stmt": "lookup", "lfn": lfn, "version": version},
                    auth,
                )
            except GridError as exc:
                if exc.code not in _UNREACHABLE:
                    raise
                self.logger.info("Catalogue at %s unreachable for %s: %s", node_id, lfn, exc)
                continue
            return FileEntry.from_dict(response["entry"])
        return None

    def _read_nearby(self, entry: FileEntry) -> Optional[bytes]:
        """A verified copy of ``entry`` from this node's storage or cache."""
        sources = [
            (self.storages[replica.se_id], replica.object_key)
            for replica in entry.replicas
            if replica.se_id in self.storages
        ]
        sources.append((self.storage, f"{entry.guid}~v{entry.version}"))
        for storage, object_key in sources:
            if not storage.has(object_key):
                continue
            try:
                data = storage.get(object_key)
            except GridError as exc:
                self.logger.info("Local copy %s unusable: %s", object_key, exc)
                continue
            if sha256_hex(data) == entry.checksum:
                return data
        return None

    def _fetch(self, entry: FileEntry) -> bytes:
        """Bytes of ``entry`` from the nearest healthy replica, local first."""
        replicas = sorted(entry.replicas, key=lambda r: (r.se_id not in self.storages, r))
        failure: Optional[GridError] = None
        for replica in replicas:
            try:
                if replica.se_id in self.storages:
                    data = self.storages[replica.se_id].get(replica.object_key)
                else:
                    node_id = self.topology.node_for_se(replica.se_id)
                    response = self.router.call(node_id, "se.get", replica.to_dict())
                    data = unb64(response["data"], "replica")
            except GridError as exc:
                self.logger.info("Replica %s of %s unavailable: %s", replica, entry.lfn, exc)
                failure = exc
                continue
            actual = sha256_hex(data)
            if actual != entry.checksum:
                failure = grid_error(
                    "ChecksumMismatch",
                    subject=f"{entry.lfn} at {replica.se_id}",
                    expected=entry.checksum,
                    actual=actual,
                )
                continue
            return data
        raise failure or GridError("NotFound", f"{entry.lfn} has no reachable replica")
