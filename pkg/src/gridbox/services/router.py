"""Endpoint routing: local calls dispatch in-process, remote ones ride pooled channels."""

import json
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

from gridbox.errors import GridError
from gridbox.models import NodeSpec

Dispatch = Callable[[str, Any, Dict[str, Any], Dict[str, str]], Any]

# codes after which a pooled channel is discarded and re-handshaken on next use
_CHANNEL_FAULTS = frozenset({"ChannelClosed", "MacMismatch", "Timeout", "NoRoute"})


@dataclass
class Route:
    node_id: str
    local: bool
    channel: Any = None


class PendingCall:
    """A request in flight; ``result()`` waits for its reply."""

    def __init__(self, router: "Router", node_id: str, channel=None, future=None, value=None):
        self.router = router
        self.node_id = node_id
        self.channel = channel
        self.future = future
        self.value = value

    def result(self) -> Any:
        if self.channel is None:
            return self.value
        try:
            return self.channel.wait(self.future)
        except GridError as exc:
            if exc.code in _CHANNEL_FAULTS:
                self.router.drop(self.node_id)
            raise


def _json_copy(value: Any) -> Any:
    return json.loads(json.dumps(value))


class Router:
    def __init__(
        self,
        node: NodeSpec,
        topology,
        transport,
        dispatch: Dispatch,
        logger,
        concurrent: bool = False,
    ):
        self.node = node
        self.topology = topology
        self.transport = transport
        self.dispatch = dispatch
        self.logger = logger
        self.concurrent = concurrent
        self._pool: Dict[str, Any] = {}
        self._pool_lock = threading.Lock()
        self._connect_locks: Dict[str, Any] = {}

    def route(self, node_id: str) -> Route:
        if node_id == self.node.node_id:
            return Route(node_id, local=True)
        peer = self.topology.node(node_id)
        return Route(node_id, local=False, channel=self._channel(peer))

    def call(
        self,
        node_id: str,
        op: str,
        args: Any,
        auth: Optional[Dict[str, Any]] = None,
        headers: Optional[Dict[str, str]] = None,
    ) -> Any:
        return self.submit(node_id, op, args, auth, headers).result()

    def submit(
        self,
        node_id: str,
        op: str,
        args: Any,
        auth: Optional[Dict[str, Any]] = None,
        headers: Optional[Dict[str, str]] = None,
    ) -> PendingCall:
        """Send a request without waiting for its reply; local calls run at once."""
        if node_id == self.node.node_id:
            local_auth = dict(auth or {})
            local_auth["host"] = self.node.host
            result = self.dispatch(op, _json_copy(args), local_auth, dict(headers or {}))
            return PendingCall(self, node_id, value=_json_copy(result))

        relay = self.relay_for(node_id)
        if relay is not None:
            forward = {"node_id": node_id, "op": op, "args": args, "headers": dict(headers or {})}
            return self._send(relay, "relay.forward", forward, auth)
        return self._send(node_id, op, args, auth, headers)

    def relay_for(self, node_id: str) -> Optional[str]:
        """In P2, traffic between two VOs crosses the central node."""
        if self.topology.mode != "P2":
            return None
        central = self.topology.central_node
        if central in (self.node.node_id, node_id):
            return None
        if self.topology.node(node_id).vo == self.node.vo:
            return None
        return central

    def _send(
        self,
        node_id: str,
        op: str,
        args: Any,
        auth: Optional[Dict[str, Any]],
        headers: Optional[Dict[str, str]] = None,
    ) -> PendingCall:
        try:
            route = self.route(node_id)
            future = route.channel.send_request(op, args, auth or {}, headers)
        except GridError as exc:
            if exc.code in _CHANNEL_FAULTS:
                self.drop(node_id)
            raise
        return PendingCall(self, node_id, channel=route.channel, future=future)

    def drop(self, node_id: str):
        with self._pool_lock:
            channel = self._pool.pop(node_id, None)
        if channel is not None:
            channel.close()

    def close(self):
        with self._pool_lock:
            node_ids = list(self._pool)
        for node_id in node_ids:
            self.drop(node_id)

    def _channel(self, peer: NodeSpec):
        with self._pool_lock:
            channel = self._pool.get(peer.node_id)
            if channel is not None and channel.is_open:
                return channel
            connect_lock = self._connect_locks.setdefault(peer.node_id, threading.RLock())
        with connect_lock:
            with self._pool_lock:
                channel = self._pool.get(peer.node_id)
                if channel is not None and channel.is_open:
                    return channel
            channel = self.transport.open_channel(
                self.node.node_id, self.node.host, peer, expected_peer=peer.host
            )
            with self._pool_lock:
                self._pool[peer.node_id] = channel
            self.logger.debug("Opened channel %s -> %s", self.node.node_id, peer.node_id)
            return channel
