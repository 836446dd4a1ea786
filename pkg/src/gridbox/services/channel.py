"""Authenticated request/response channels over an abstract frame link.

A link only needs ``send(frame: bytes)`` and ``close()``; whoever owns the
link feeds incoming frames to ``on_frame``. Simulated links are pumped by the
network scheduler, socket links by a reader thread, and both share this code.
"""

import json
import threading
from collections import OrderedDict
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Any, Callable, Dict, Mapping, Optional, Set

from gridbox.constants import DEFAULT_REQUEST_TIMEOUT_SECONDS, NONCE_MEMORY, REPLAY_WINDOW
from gridbox.errors import GridError
from gridbox.services.wire import (
    NONCE_BYTES,
    ZERO_KEY,
    HostKeyring,
    Payload,
    channel_key,
    decode_frame,
    encode_frame,
    handshake_proof,
)

Handler = Callable[[str, Any, Dict[str, Any], Dict[str, str]], Any]
# runs the network until the predicate holds; returns whether it did
Pump = Callable[[Callable[[], bool]], bool]

_CONTROL_HEADERS = ("op", "seq", "code", "message")


def _json_body(document: Mapping[str, Any]) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _parse_body(payload: Payload) -> Dict[str, Any]:
    if not payload.body:
        return {}
    try:
        document = json.loads(payload.body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise GridError("MalformedPayload", "body is not a JSON document") from exc
    if not isinstance(document, dict):
        raise GridError("MalformedPayload", "body must be a JSON object")
    return document


class NonceRegistry:
    """Initiator nonces a responder has already seen; the oldest are forgotten first."""

    def __init__(self, capacity: int = NONCE_MEMORY):
        self.capacity = capacity
        self._seen: "OrderedDict[bytes, None]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._seen)

    def claim(self, nonce: bytes) -> bool:
        with self._lock:
            if nonce in self._seen:
                return False
            self._seen[nonce] = None
            while len(self._seen) > self.capacity:
                self._seen.popitem(last=False)
            return True


class SequenceWindow:
    """Accepts each frame sequence number once, within ``size`` of the highest seen."""

    def __init__(self, size: int = REPLAY_WINDOW):
        self.size = size
        self.highest = 0
        self._seen: Set[int] = set()
        self._lock = threading.Lock()

    def accept(self, seq: int) -> bool:
        with self._lock:
            if seq <= 0 or seq <= self.highest - self.size or seq in self._seen:
                return False
            self._seen.add(seq)
            if seq > self.highest:
                self.highest = seq
                floor = seq - self.size
                self._seen = {item for item in self._seen if item > floor}
            return True


class ClientChannel:
    """Initiator side: handshake, then multiplexed requests by correlation id."""

    def __init__(
        self,
        link,
        keyring: HostKeyring,
        local_host: str,
        entropy,
        logger,
        expected_peer: Optional[str] = None,
        timeout: float = DEFAULT_REQUEST_TIMEOUT_SECONDS,
        synchronous: bool = False,
        pump: Optional[Pump] = None,
    ):
        self.link = link
        self.keyring = keyring
        self.local_host = local_host
        self.entropy = entropy
        self.logger = logger
        self.expected_peer = expected_peer
        self.timeout = timeout
        self.synchronous = synchronous
        self.pump = pump
        self.peer_host: Optional[str] = None
        self.state = "new"
        self._key: Optional[bytes] = None
        self._handshake_inbox: Optional[Future] = None
        self._pending: Dict[int, Future] = {}
        self._next_correlation = 0
        self._send_seq = 0
        self._window = SequenceWindow()
        self._send_lock = threading.RLock()
        self._pending_lock = threading.Lock()

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def open(self) -> "ClientChannel":
        nonce_i = self.entropy.token_bytes(NONCE_BYTES)
        self.state = "handshake"
        ack = self._handshake_step(
            Payload("HELLO", 0, {"host": self.local_host, "nonce": nonce_i.hex()})
        )
        try:
            peer = ack.headers["host"]
            nonce_r = bytes.fromhex(ack.headers["nonce"])
            proof_r = bytes.fromhex(ack.headers["proof"])
        except (KeyError, ValueError) as exc:
            self.close()
            raise GridError("BadProof", "malformed HELLO-ACK") from exc
        if self.expected_peer is not None and peer != self.expected_peer:
            self.close()
            raise GridError("BadProof", f"expected {self.expected_peer}, {peer} answered")
        try:
            expected = handshake_proof(
                self.keyring.secret(peer), "R", nonce_i, nonce_r, self.local_host, peer
            )
            own_secret = self.keyring.secret(self.local_host)
        except GridError:
            self.close()
            raise
        if expected != proof_r:
            self.close()
            raise GridError("BadProof", f"{peer} failed to prove its host certificate")

        proof_i = handshake_proof(own_secret, "I", nonce_i, nonce_r, self.local_host, peer)
        done = self._handshake_step(
            Payload(
                "HELLO",
                0,
                {"host": self.local_host, "nonce": nonce_i.hex(), "proof": proof_i.hex()},
            )
        )
        if done.headers.get("status") != "ok":
            self.close()
            raise GridError("BadProof", "handshake was not confirmed")
        self._key = channel_key(proof_i, proof_r, nonce_i, nonce_r)
        self.peer_host = peer
        self.state = "open"
        self.logger.debug("Channel %s -> %s established", self.local_host, peer)
        return self

    def request(
        self,
        op: str,
        args: Any,
        auth: Optional[Dict[str, Any]] = None,
        headers: Optional[Dict[str, str]] = None,
    ) -> Any:
        future = self.send_request(op, args, auth, headers)
        payload = self._wait(future)
        return self._result(payload)

    def send_request(
        self,
        op: str,
        args: Any,
        auth: Optional[Dict[str, Any]] = None,
        headers: Optional[Dict[str, str]] = None,
    ) -> Future:
        """Send a REQ frame and return the future its RSP/ERR will resolve."""
        if self.state != "open" or self._key is None:
            raise GridError("ChannelClosed", "channel is not open")
        future: Future = Future()
        with self._send_lock:
            self._next_correlation += 1
            self._send_seq += 1
            correlation_id = self._next_correlation
            frame_headers = {"op": op, "seq": str(self._send_seq)}
            for key, value in (headers or {}).items():
                if key not in _CONTROL_HEADERS:
                    frame_headers[key] = value
            body = _json_body({"args": args, "auth": auth or {}})
            frame = encode_frame(Payload("REQ", correlation_id, frame_headers, body), self._key)
            future.correlation_id = correlation_id  # type: ignore[attr-defined]
            with self._pending_lock:
                self._pending[correlation_id] = future
            try:
                self.link.send(frame)
            except GridError:
                with self._pending_lock:
                    self._pending.pop(correlation_id, None)
                raise
        return future

    def wait(self, future: Future) -> Any:
        return self._result(self._wait(future))

    def on_frame(self, frame: bytes):
        if self.state in ("new", "handshake"):
            try:
                payload = decode_frame(frame, ZERO_KEY)
            except GridError as exc:
                self._resolve_handshake(exc)
                return
            self._resolve_handshake(payload)
            return
        if self.state != "open" or self._key is None:
            return

        try:
            payload = decode_frame(frame, self._key)
        except GridError as exc:
            self.logger.warning("Dropping channel to %s: %s", self.peer_host, exc)
            self.close(exc)
            return
        seq = int(payload.headers.get("seq", "0") or 0)
        if not self._window.accept(seq):
            self.logger.warning("Replayed frame from %s ignored (seq %s)", self.peer_host, seq)
            return

        if payload.correlation_id == 0 and payload.type == "ERR":
            error = GridError(
                payload.headers.get("code", "RemoteError"), payload.headers.get("message", "")
            )
            self.close(error)
            return
        with self._pending_lock:
            future = self._pending.pop(payload.correlation_id, None)
        if future is not None and not future.done():
            future.set_result(payload)

    def close(self, error: Optional[GridError] = None):
        if self.state == "closed":
            return
        self.state = "closed"
        failure = error or GridError("ChannelClosed", "channel closed")
        with self._pending_lock:
            pending = list(self._pending.values())
            self._pending.clear()
        for future in pending:
            if not future.done():
                future.set_exception(failure)
        if self._handshake_inbox is not None and not self._handshake_inbox.done():
            self._handshake_inbox.set_exception(failure)
        try:
            self.link.close()
        except OSError:
            pass

    def _handshake_step(self, payload: Payload) -> Payload:
        inbox = self._handshake_inbox = Future()
        self.link.send(encode_frame(payload, ZERO_KEY))
        if self.pump is not None:
            self.pump(inbox.done)
        try:
            reply = inbox.result(timeout=0 if self.synchronous else self.timeout)
        except FutureTimeout as exc:
            self.close()
            raise GridError("Timeout", "no handshake reply") from exc
        if reply.type == "ERR":
            self.close()
            raise GridError(reply.headers.get("code", "BadProof"), reply.headers.get("message", ""))
        if reply.type != "HELLO-ACK":
            self.close()
            raise GridError("BadProof", f"unexpected {reply.type} during handshake")
        return reply

    def _resolve_handshake(self, outcome):
        inbox = self._handshake_inbox
        if inbox is None or inbox.done():
            return
        if isinstance(outcome, GridError):
            inbox.set_exception(outcome)
        else:
            inbox.set_result(outcome)

    def _wait(self, future: Future) -> Payload:
        if self.pump is not None:
            self.pump(future.done)
        try:
            return future.result(timeout=0 if self.synchronous else self.timeout)
        except FutureTimeout as exc:
            with self._pending_lock:
                self._pending.pop(getattr(future, "correlation_id", -1), None)
            raise GridError("Timeout", f"no reply from {self.peer_host}") from exc

    @staticmethod
    def _result(payload: Payload) -> Any:
        if payload.type == "ERR":
            raise GridError(
                payload.headers.get("code", "RemoteError"), payload.headers.get("message", "")
            )
        return _parse_body(payload).get("result")


class ServerChannel:
    """Responder side of one connection."""

    def __init__(
        self,
        link,
        keyring: HostKeyring,
        local_host: str,
        handler: Handler,
        entropy,
        nonces: NonceRegistry,
        logger,
    ):
        self.link = link
        self.keyring = keyring
        self.local_host = local_host
        self.handler = handler
        self.entropy = entropy
        self.nonces = nonces
        self.logger = logger
        self.state = "hello"
        self.peer_host: Optional[str] = None
        self._nonce_i = b""
        self._nonce_r = b""
        self._proof_r = b""
        self._key: Optional[bytes] = None
        self._send_seq = 0
        self._window = SequenceWindow()
        self._send_lock = threading.RLock()

    @property
    def is_open(self) -> bool:
        return self.state == "open"

    def on_frame(self, frame: bytes):
        if self.state == "closed":
            return
        if self.state in ("hello", "proof"):
            self._on_handshake(frame)
            return

        assert self._key is not None
        try:
            payload = decode_frame(frame, self._key)
        except GridError as exc:
            self.logger.warning("Bad frame from %s: %s", self.peer_host, exc)
            self._send(Payload("ERR", 0, {"code": exc.code, "message": exc.message}))
            self.close()
            return
        seq = int(payload.headers.get("seq", "0") or 0)
        if not self._window.accept(seq):
            self._send(
                Payload(
                    "ERR",
                    payload.correlation_id,
                    {"code": "ReplayDetected", "message": f"stale sequence {seq}"},
                )
            )
            return
        if payload.type != "REQ":
            return

        op = payload.headers.get("op", "")
        headers = {k: v for k, v in payload.headers.items() if k not in _CONTROL_HEADERS}
        try:
            document = _parse_body(payload)
            auth = dict(document.get("auth") or {})
            auth["host"] = self.peer_host
            result = self.handler(op, document.get("args"), auth, headers)
            reply = Payload("RSP", payload.correlation_id, {}, _json_body({"result": result}))
        except GridError as exc:
            reply = Payload(
                "ERR", payload.correlation_id, {"code": exc.code, "message": exc.message}
            )
        except Exception as exc:  # noqa: BLE001
            self.logger.exception("Handler for %s failed", op)
            reply = Payload(
                "ERR", payload.correlation_id, {"code": "InternalError", "message": str(exc)}
            )
        if self.state == "open":
            self._send(reply)

    def close(self):
        if self.state == "closed":
            return
        self.state = "closed"
        try:
            self.link.close()
        except OSError:
            pass

    def _on_handshake(self, frame: bytes):
        try:
            payload = decode_frame(frame, ZERO_KEY)
        except GridError:
            self.close()
            return
        if payload.type != "HELLO":
            self._refuse("BadProof", "expected HELLO")
            return

        if self.state == "hello":
            host = payload.headers.get("host", "")
            try:
                nonce_i = bytes.fromhex(payload.headers.get("nonce", ""))
            except ValueError:
                self._refuse("BadProof", "malformed nonce")
                return
            if not self.keyring.has(host):
                self._refuse("UnknownHost", f"host {host} is not enrolled")
                return
            if not nonce_i or not self.nonces.claim(nonce_i):
                self._refuse("BadProof", "nonce has been used before")
                return
            self.peer_host = host
            self._nonce_i = nonce_i
            self._nonce_r = self.entropy.token_bytes(NONCE_BYTES)
            self._proof_r = handshake_proof(
                self.keyring.secret(self.local_host),
                "R",
                self._nonce_i,
                self._nonce_r,
                host,
                self.local_host,
            )
            self.state = "proof"
            self._send_plain(
                Payload(
                    "HELLO-ACK",
                    0,
                    {
                        "host": self.local_host,
                        "nonce": self._nonce_r.hex(),
                        "proof": self._proof_r.hex(),
                    },
                )
            )
            return

        assert self.peer_host is not None
        expected = handshake_proof(
            self.keyring.secret(self.peer_host),
            "I",
            self._nonce_i,
            self._nonce_r,
            self.peer_host,
            self.local_host,
        )
        if payload.headers.get("proof", "") != expected.hex():
            self._refuse("BadProof", f"{self.peer_host} failed to prove its host certificate")
            return
        self._key = channel_key(expected, self._proof_r, self._nonce_i, self._nonce_r)
        self.state = "open"
        self._send_plain(Payload("HELLO-ACK", 0, {"host": self.local_host, "status": "ok"}))

    def _refuse(self, code: str, message: str):
        self.logger.warning("Handshake refused: %s", message)
        self._send_plain(Payload("ERR", 0, {"code": code, "message": message}))
        self.close()

    def _send_plain(self, payload: Payload):
        with self._send_lock:
            self.link.send(encode_frame(payload, ZERO_KEY))

    def _send(self, payload: Payload):
        assert self._key is not None
        with self._send_lock:
            self._send_seq += 1
            payload.headers["seq"] = str(self._send_seq)
            self.link.send(encode_frame(payload, self._key))
