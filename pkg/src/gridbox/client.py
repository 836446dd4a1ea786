"""Workstation side of the portal: login, MI operations and admin verbs over the wire."""

import base64
import logging
from typing import Any, Dict, Optional, Sequence

from .errors import GridError
from .models import NodeSpec, Task
from .services.algorithms import artifact_checksum
from .services.federation import ResultSet

logger = logging.getLogger("gridbox.client")


class GridClient:
    """One workstation talking to the portal of one grid-box."""

    def __init__(
        self,
        transport,
        peer: NodeSpec,
        local_host: str,
        expected_peer: Optional[str] = None,
        token: Optional[str] = None,
    ):
        self.transport = transport
        self.peer = peer
        self.local_host = local_host
        self.expected_peer = expected_peer
        self.token = token
        self.session: Dict[str, Any] = {}
        self._channel = None

    # transport

    def call(self, op: str, args: Dict[str, Any]) -> Any:
        channel = self._open()
        try:
            return channel.request(op, args, {})
        except GridError as exc:
            if exc.code in ("ChannelClosed", "MacMismatch", "Timeout"):
                self.close()
            raise

    def close(self):
        if self._channel is not None:
            self._channel.close()
            self._channel = None

    def _open(self):
        if self._channel is None or not self._channel.is_open:
            self._channel = self.transport.open_channel(
                self.local_host, self.local_host, self.peer, expected_peer=self.expected_peer
            )
        return self._channel

    # session

    def login(
        self, principal: str, secret: str, mechanism: str = "PWD"
    ) -> Dict[str, Any]:
        self.session = self.call(
            "portal.login", {"principal": principal, "mechanism": mechanism, "secret": secret}
        )
        self.token = self.session["token"]
        logger.debug("Logged in as %s (session %s)", principal, self.session["session_id"])
        return self.session

    def logout(self):
        if not self.token:
            return
        try:
            self.call("portal.logout", {"token": self.token})
        finally:
            self.token = None
            self.session = {}

    def dispatch(self, op: str, args: Optional[Dict[str, Any]] = None) -> Any:
        if not self.token:
            raise GridError("NotAuthenticated", "log in first")
        return self.call("portal.dispatch", {"token": self.token, "op": op, "args": args or {}})

    # MI operations

    def add(self, lfn: str, data: bytes) -> str:
        encoded = base64.b64encode(data).decode("ascii")
        return self.dispatch("mi.add", {"lfn": lfn, "data": encoded})["guid"]

    def retrieve_entry(self, lfn: str, version: Optional[int] = None) -> Dict[str, Any]:
        """Retrieved bytes plus the catalogue facts (guid, version, checksum) served with them."""
        result = dict(self.dispatch("mi.retrieve", {"lfn": lfn, "version": version}))
        result["data"] = base64.b64decode(result["data"])
        return result

    def retrieve(self, lfn: str, version: Optional[int] = None) -> bytes:
        return self.retrieve_entry(lfn, version)["data"]

    def update(self, lfn: str, data: bytes) -> int:
        encoded = base64.b64encode(data).decode("ascii")
        return int(self.dispatch("mi.update", {"lfn": lfn, "data": encoded})["version"])

    def query(
        self, text: str, query_year: Optional[int] = None, supervo: Optional[str] = None
    ) -> ResultSet:
        args: Dict[str, Any] = {"text": text}
        if query_year is not None:
            args["query_year"] = query_year
        if supervo:
            args["supervo"] = supervo
        return ResultSet.from_dict(self.dispatch("mi.query", args))

    def add_algorithm(
        self, name: str, artifact: bytes, checksum: Optional[str] = None
    ) -> Dict[str, Any]:
        return self.dispatch(
            "mi.addAlgorithm",
            {
                "name": name,
                "artifact": base64.b64encode(artifact).decode("ascii"),
                "checksum": checksum or artifact_checksum(artifact),
            },
        )

    def execute_algorithm(self, name: str, inputs: Sequence[str], output: str) -> str:
        result = self.dispatch(
            "mi.executeAlgorithm", {"name": name, "inputs": list(inputs), "output": output}
        )
        return result["task_id"]

    def job_status(self, task_id: str) -> Task:
        return Task.from_dict(self.dispatch("job.status", {"task_id": task_id}))

    def job_kill(self, task_id: str) -> Task:
        return Task.from_dict(self.dispatch("job.kill", {"task_id": task_id}))

    def admin(self, verb: str, **args: Any) -> Dict[str, Any]:
        return self.dispatch(f"admin.{verb}", args)
