"""File transfer daemon: chunked, checksum-verified copies between storage elements."""

import base64
import hashlib
import threading
from typing import Callable, Dict, List, Mapping, Tuple

from gridbox.constants import DEFAULT_FTD_CHUNK_BYTES
from gridbox.errors import GridError
from gridbox.errors_catalog import grid_error
from gridbox.models import TransferRequest
from gridbox.services.policy import AccessPolicy, AuthContext
from gridbox.services.storage import StorageElement

StorageLookup = Callable[[str], StorageElement]


def parse_chunk_header(value: str) -> Tuple[int, int]:
    index, sep, total = value.partition("/")
    try:
        current, count = int(index), int(total)
    except ValueError as exc:
        raise GridError("MalformedPayload", f"bad chunk header {value!r}") from exc
    if not sep or count < 1 or not 1 <= current <= count:
        raise GridError("MalformedPayload", f"bad chunk header {value!r}")
    return current, count


class FileTransferService:
    def __init__(
        self,
        node,
        topology,
        keyring,
        storage_for: StorageLookup,
        router,
        policy: AccessPolicy,
        logger,
        chunk_bytes: int = DEFAULT_FTD_CHUNK_BYTES,
    ):
        self.node = node
        self.topology = topology
        self.keyring = keyring
        self.storage_for = storage_for
        self.router = router
        self.policy = policy
        self.logger = logger
        self.chunk_bytes = chunk_bytes
        self._partial: Dict[str, List[bytes]] = {}
        self._lock = threading.Lock()

    # sending side

    def transfer(self, ctx: AuthContext, request: TransferRequest) -> Dict[str, str]:
        self.policy.require_host(ctx)
        source = self.storage_for(request.source_se)
        if not source.holds(request.object_key):
            raise GridError(
                "SourceMissing", f"{request.source_se} holds no {request.object_key}"
            )
        dest_node = self.topology.node(self.topology.node_for_se(request.dest_se))
        if not self.keyring.has(dest_node.host):
            raise grid_error("PeerUnauthenticated", host=dest_node.host)

        data = source.get(request.object_key)
        owner_vo = source.stat(request.object_key).owner_vo
        chunks = [
            data[start : start + self.chunk_bytes]
            for start in range(0, len(data), self.chunk_bytes)
        ] or [b""]
        self.logger.info(
            "Transfer %s: %s -> %s in %s chunk(s)",
            request.transfer_id,
            request.source_se,
            request.dest_se,
            len(chunks),
        )
        try:
            for index, chunk in enumerate(chunks, start=1):
                self.router.call(
                    dest_node.node_id,
                    "ftd.receive",
                    {
                        "transfer_id": request.transfer_id,
                        "se_id": request.dest_se,
                        "object_key": request.object_key,
                        "owner_vo": owner_vo,
                        "checksum": request.checksum,
                        "data": base64.b64encode(chunk).decode("ascii"),
                    },
                    headers={"chunk": f"{index}/{len(chunks)}"},
                )
        except GridError:
            self._abort_remote(dest_node.node_id, request.transfer_id)
            raise
        return {"status": "DONE", "dest_se": request.dest_se}

    def _abort_remote(self, node_id: str, transfer_id: str):
        try:
            self.router.call(node_id, "ftd.abort", {"transfer_id": transfer_id})
        except GridError as exc:
            self.logger.debug("Abort of %s at %s failed: %s", transfer_id, node_id, exc)

    # receiving side

    def receive(self, ctx: AuthContext, args: Mapping, headers: Mapping[str, str]) -> Dict:
        self.policy.require_host(ctx)
        index, count = parse_chunk_header(headers.get("chunk", "1/1"))
        transfer_id = args["transfer_id"]
        chunk = base64.b64decode(args["data"])
        with self._lock:
            parts = self._partial.setdefault(transfer_id, [])
            if len(parts) != index - 1:
                self._partial.pop(transfer_id, None)
                raise GridError("MalformedPayload", f"chunk {index}/{count} out of order")
            parts.append(chunk)
            if index < count:
                return {"received": index}
            data = b"".join(self._partial.pop(transfer_id))

        actual = hashlib.sha256(data).hexdigest()
        if actual != args["checksum"]:
            self.logger.warning("Transfer %s arrived corrupted; discarded", transfer_id)
            raise grid_error(
                "ChecksumMismatch",
                subject=f"transfer {transfer_id}",
                expected=args["checksum"],
                actual=actual,
            )
        storage = self.storage_for(args["se_id"])
        if storage.holds(args["object_key"]):
            if storage.stat(args["object_key"]).checksum == actual:
                return {"received": index, "stored": args["object_key"]}
            raise GridError("AlreadyExists", f"{args['se_id']} holds another copy")
        provenance = f"transfer:{transfer_id}"
        storage.put(args["object_key"], data, args["owner_vo"], provenance=provenance)
        return {"received": index, "stored": args["object_key"]}

    def abort(self, ctx: AuthContext, transfer_id: str):
        self.policy.require_host(ctx)
        with self._lock:
            self._partial.pop(transfer_id, None)
