"""Frame links: the in-process simulated network and TCP sockets."""

import base64
import binascii
import json
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, FrozenSet, Iterator, List, Optional, Set, Tuple

from gridbox.errors import GridError
from gridbox.services.channel import ClientChannel, NonceRegistry, ServerChannel
from gridbox.services.clock import SeededEntropy
from gridbox.services.wire import HostKeyring, read_frame, split_frame

Accept = Callable[[Any], ServerChannel]


def _pair(a: str, b: str) -> FrozenSet[str]:
    return frozenset((a, b))


@dataclass(frozen=True)
class CapturedFrame:
    tick: int
    src: str
    dst: str
    frame: bytes

    @property
    def payload(self) -> bytes:
        try:
            return split_frame(self.frame)[0]
        except GridError:
            return self.frame[4:]

    def start_line(self) -> str:
        return self.payload.split(b"\n", 1)[0].decode("utf-8", "replace")

    def header(self, name: str) -> Optional[str]:
        head = self.payload.split(b"\n\n", 1)[0].decode("utf-8", "replace")
        for line in head.split("\n")[1:]:
            key, _, value = line.partition("=")
            if key == name:
                return value
        return None


def _texts(value: Any) -> Iterator[str]:
    """Every string inside a JSON value, plus the decoded form of base64 strings."""
    if isinstance(value, str):
        yield value
        if len(value) >= 8 and len(value) % 4 == 0:
            try:
                yield base64.b64decode(value, validate=True).decode("latin-1")
            except (binascii.Error, ValueError):
                pass
    elif isinstance(value, dict):
        for key, item in value.items():
            yield str(key)
            yield from _texts(item)
    elif isinstance(value, list):
        for item in value:
            yield from _texts(item)
    elif value is not None:
        yield str(value)


class FrameInspector:
    """Records every frame crossing the simulated network."""

    def __init__(self):
        self.frames: List[CapturedFrame] = []
        self._lock = threading.Lock()

    def capture(self, frame: CapturedFrame):
        with self._lock:
            self.frames.append(frame)

    def between(self, a: str, b: str) -> List[CapturedFrame]:
        pair = _pair(a, b)
        return [item for item in self.frames if _pair(item.src, item.dst) == pair]

    def application_frames(self, a: str, b: str) -> List[CapturedFrame]:
        return [
            item
            for item in self.between(a, b)
            if item.start_line().split(" ")[1:2] in (["REQ"], ["RSP"])
        ]

    def views(self, frame: CapturedFrame) -> Iterator[str]:
        payload = frame.payload
        yield payload.decode("latin-1")
        _, _, body = payload.partition(b"\n\n")
        if not body:
            return
        try:
            decoded = base64.b64decode(body, validate=True)
        except (binascii.Error, ValueError):
            return
        yield decoded.decode("latin-1")
        try:
            document = json.loads(decoded.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return
        yield from _texts(document)

    def scan(self, needle: str, include_workstations: bool = False) -> List[CapturedFrame]:
        """Frames whose payload, body or nested base64 fields contain ``needle``."""
        hits = []
        for frame in list(self.frames):
            if not include_workstations and (
                frame.src.startswith("ws.") or frame.dst.startswith("ws.")
            ):
                continue
            if any(needle in text for text in self.views(frame)):
                hits.append(frame)
        return hits


class SimLink:
    """One direction of an in-process connection between two parties."""

    def __init__(self, network: "SimNetwork", src: str, dst: str):
        self.network = network
        self.src = src
        self.dst = dst
        self.peer: Optional["SimLink"] = None
        self.receiver: Optional[Callable[[bytes], None]] = None
        self.closed = False

    def send(self, frame: bytes):
        if self.closed or self.peer is None:
            raise GridError("ChannelClosed", f"link {self.src}->{self.dst} is closed")
        self.network.transmit(self, frame)

    def close(self):
        self.closed = True
        if self.peer is not None:
            self.peer.closed = True


@dataclass
class InFlight:
    due: int
    link: "SimLink"
    captured: CapturedFrame


class SimNetwork:
    """Seeded delivery scheduler with partitions, delays and byte-flip corruption.

    Sent frames wait in flight until a blocked caller pumps the network. Each step
    delivers one ready frame picked by the seeded entropy source, so concurrent
    deliveries interleave differently per seed; the virtual clock only moves forward
    when nothing is ready but delayed frames remain.
    """

    def __init__(self, clock, logger, events=None, timeout_ticks: int = 10, entropy=None):
        self.clock = clock
        self.logger = logger
        self.events = events
        self.timeout_ticks = timeout_ticks
        self.entropy = entropy or SeededEntropy(0)
        self.inspector = FrameInspector()
        self._servers: Dict[str, Tuple[str, Accept]] = {}
        self._partitions: Set[FrozenSet[str]] = set()
        self._delays: Dict[FrozenSet[str], int] = {}
        self._corruptions: Dict[FrozenSet[str], int] = {}
        self._in_flight: List[InFlight] = []
        self._lock = threading.RLock()

    @property
    def nodes(self) -> List[str]:
        return sorted(node for node, _ in self._servers.values())

    def attach(self, node_id: str, host: str, accept: Accept):
        self._servers[host] = (node_id, accept)

    def detach(self, host: str):
        self._servers.pop(host, None)

    def connect(self, src_node: str, dst_host: str) -> SimLink:
        target = self._servers.get(dst_host)
        if target is None:
            raise GridError("NoRoute", f"no grid-box listens as {dst_host}")
        dst_node, accept = target
        if _pair(src_node, dst_node) in self._partitions:
            raise GridError("NoRoute", f"{dst_node} is unreachable from {src_node}")
        outbound = SimLink(self, src_node, dst_node)
        inbound = SimLink(self, dst_node, src_node)
        outbound.peer, inbound.peer = inbound, outbound
        inbound.receiver = accept(inbound).on_frame
        return outbound

    # fault injection

    def _check_link(self, a: str, b: str) -> FrozenSet[str]:
        known = set(self.nodes)
        if a == b or a not in known or b not in known:
            raise GridError("UnknownLink", f"no link between {a} and {b}")
        return _pair(a, b)

    def partition(self, a: str, b: str):
        with self._lock:
            self._partitions.add(self._check_link(a, b))
        self._event(a, "partition", f"{a}-{b}")

    def heal(self, a: str, b: str):
        with self._lock:
            pair = self._check_link(a, b)
            self._partitions.discard(pair)
            self._delays.pop(pair, None)
        self._event(a, "heal", f"{a}-{b}")

    def delay(self, a: str, b: str, ticks: int):
        with self._lock:
            self._delays[self._check_link(a, b)] = ticks
        self._event(a, "delay", f"{a}-{b} {ticks}")

    def corrupt(self, a: str, b: str, frame_number: int = 1):
        """Flip one payload byte of the ``frame_number``-th next frame on the link."""
        if frame_number < 1:
            raise GridError("BadConfig", "frame number counts from 1")
        with self._lock:
            self._corruptions[self._check_link(a, b)] = frame_number
        self._event(a, "corrupt", f"{a}-{b} #{frame_number}")

    def transmit(self, link: SimLink, frame: bytes):
        pair = _pair(link.src, link.dst)
        with self._lock:
            if pair in self._partitions:
                raise GridError("NoRoute", f"{link.dst} is unreachable from {link.src}")
            latency = self._delays.get(pair, 0)
            countdown = self._corruptions.get(pair)
            if countdown is not None:
                if countdown <= 1:
                    del self._corruptions[pair]
                    frame = _flip_payload_byte(frame)
                else:
                    self._corruptions[pair] = countdown - 1

        captured = CapturedFrame(self.clock.tick, link.src, link.dst, frame)
        self.inspector.capture(captured)
        if latency >= self.timeout_ticks:
            self._event(link.src, "drop", f"{link.src}>{link.dst} {captured.start_line()}")
            return
        with self._lock:
            self._in_flight.append(InFlight(self.clock.tick + latency, link, captured))

    @property
    def in_flight(self) -> int:
        with self._lock:
            return len(self._in_flight)

    def run_until(self, done: Callable[[], bool]) -> bool:
        """Deliver frames until ``done()`` holds or nothing is left in flight."""
        while not done():
            item = self._next_ready()
            if item is None:
                return False
            self._deliver(item)
        return True

    def settle(self):
        """Deliver everything still in flight."""
        self.run_until(lambda: False)

    def _next_ready(self) -> Optional[InFlight]:
        with self._lock:
            if not self._in_flight:
                return None
            ready = [i for i, item in enumerate(self._in_flight) if item.due <= self.clock.tick]
            if not ready:
                self.clock.advance_to(min(item.due for item in self._in_flight))
                ready = [
                    i for i, item in enumerate(self._in_flight) if item.due <= self.clock.tick
                ]
            pick = self.entropy.randbelow(len(ready)) if len(ready) > 1 else 0
            return self._in_flight.pop(ready[pick])

    def _deliver(self, item: InFlight):
        link, captured = item.link, item.captured
        detail = f"{link.src}>{link.dst} {captured.start_line()}"
        if _pair(link.src, link.dst) in self._partitions:
            self._event(link.src, "drop", detail)
            return
        op = captured.header("op")
        if op:
            detail += f" op={op}"
        self._event(link.dst, "frame", f"{detail} bytes={len(captured.frame)}")
        receiver = link.peer.receiver if link.peer is not None else None
        if receiver is None:
            return
        try:
            receiver(captured.frame)
        except GridError as exc:
            self.logger.debug("Delivery %s failed: %s", detail, exc)

    def _event(self, node: str, kind: str, detail: str):
        if self.events is not None:
            self.events.record(node, kind, detail)


def _flip_payload_byte(frame: bytes) -> bytes:
    payload_length = max(len(frame) - 4 - 32, 1)
    index = 4 + payload_length // 2
    corrupted = bytearray(frame)
    corrupted[index] ^= 0xFF
    return bytes(corrupted)


class SimTransport:
    """Opens client channels and accepts server channels on a ``SimNetwork``."""

    synchronous = True

    def __init__(self, network: SimNetwork, keyring: HostKeyring, entropy, logger, timeout=10.0):
        self.network = network
        self.keyring = keyring
        self.entropy = entropy
        self.logger = logger
        self.timeout = timeout
        self.nonces = NonceRegistry()

    def listen(self, node_id: str, host: str, handler):
        def accept(link: SimLink) -> ServerChannel:
            return ServerChannel(
                link, self.keyring, host, handler, self.entropy, self.nonces, self.logger
            )

        self.network.attach(node_id, host, accept)

    def open_channel(
        self, local_node: str, local_host: str, peer, expected_peer: Optional[str] = None
    ) -> ClientChannel:
        link = self.network.connect(local_node, peer.host)
        channel = ClientChannel(
            link,
            self.keyring,
            local_host,
            self.entropy,
            self.logger,
            expected_peer=expected_peer,
            timeout=self.timeout,
            synchronous=True,
            pump=self.network.run_until,
        )
        link.receiver = channel.on_frame
        return channel.open()


class SocketLink:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()
        self.closed = False

    def send(self, frame: bytes):
        if self.closed:
            raise GridError("ChannelClosed", "socket is closed")
        try:
            with self._lock:
                self.sock.sendall(frame)
        except OSError as exc:
            self.closed = True
            raise GridError("ChannelClosed", f"send failed: {exc}") from exc

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def pump_frames(stream, on_frame: Callable[[bytes], None], logger):
    """Feed frames from a socket file to ``on_frame`` until EOF."""
    while True:
        try:
            frame = read_frame(stream)
        except (GridError, OSError) as exc:
            logger.debug("Connection reader stopped: %s", exc)
            return
        if frame is None:
            return
        on_frame(frame)


def parse_address(address: str, default_port: int) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        return address, default_port
    try:
        return host, int(port)
    except ValueError as exc:
        raise GridError("BadConfig", f"bad address {address!r}") from exc


class SocketTransport:
    """TCP transport; each connection gets a reader thread feeding its channel."""

    synchronous = False

    def __init__(self, keyring: HostKeyring, entropy, logger, timeout=10.0, default_port=9345):
        self.keyring = keyring
        self.entropy = entropy
        self.logger = logger
        self.timeout = timeout
        self.default_port = default_port
        self.nonces = NonceRegistry()
        self.server: Optional[socketserver.ThreadingTCPServer] = None

    def open_channel(
        self, local_node: str, local_host: str, peer, expected_peer: Optional[str] = None
    ) -> ClientChannel:
        if not peer.address:
            raise GridError("NoRoute", f"{peer.node_id} has no address")
        host, port = parse_address(peer.address, self.default_port)
        try:
            sock = socket.create_connection((host, port), timeout=self.timeout)
        except OSError as exc:
            raise GridError("NoRoute", f"{peer.node_id} at {peer.address}: {exc}") from exc
        sock.settimeout(None)
        link = SocketLink(sock)
        channel = ClientChannel(
            link,
            self.keyring,
            local_host,
            self.entropy,
            self.logger,
            expected_peer=expected_peer,
            timeout=self.timeout,
        )
        reader = threading.Thread(
            target=self._read_then_close,
            args=(sock.makefile("rb"), channel),
            name=f"mgp-{peer.node_id}",
            daemon=True,
        )
        reader.start()
        return channel.open()

    def _read_then_close(self, stream, channel: ClientChannel):
        pump_frames(stream, channel.on_frame, self.logger)
        channel.close()

    def listen(self, node_id: str, host: str, handler, address: str = ""):
        transport = self

        class _Connection(socketserver.StreamRequestHandler):
            def handle(self):
                link = SocketLink(self.request)
                channel = ServerChannel(
                    link,
                    transport.keyring,
                    host,
                    handler,
                    transport.entropy,
                    transport.nonces,
                    transport.logger,
                )
                pump_frames(self.rfile, channel.on_frame, transport.logger)
                channel.close()

        bind_host, port = parse_address(
            address or f"0.0.0.0:{self.default_port}", self.default_port
        )
        socketserver.ThreadingTCPServer.allow_reuse_address = True
        server = socketserver.ThreadingTCPServer((bind_host, port), _Connection)
        server.daemon_threads = True
        self.server = server
        self.logger.info("%s listening on %s:%s", node_id, bind_host, port)
        return server

    def shutdown(self):
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()
            self.server = None
