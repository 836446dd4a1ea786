"""MGP/1 framing, payload codec, keyring and handshake proofs.

Frame layout::

    length:u32 (big-endian, len(payload) + 32) | payload | HMAC-SHA-256(key, payload)

Payload layout::

    MGP/1 <TYPE> <correlation-id>\\n
    key=value\\n ...
    \\n
    [base64 body]
"""

import base64
import binascii
import hashlib
import hmac
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from gridbox.constants import MAC_BYTES, MAX_FRAME_BYTES, MGP_VERSION
from gridbox.errors import GridError

FRAME_TYPES = ("REQ", "RSP", "ERR", "HELLO", "HELLO-ACK")
ZERO_KEY = bytes(32)
NONCE_BYTES = 16

_LENGTH = struct.Struct(">I")


def _escape(value: str) -> str:
    return (
        value.replace("%", "%25").replace("=", "%3D").replace("\r", "%0D").replace("\n", "%0A")
    )


def _unescape(value: str) -> str:
    out = []
    index = 0
    while index < len(value):
        char = value[index]
        if char == "%":
            code = value[index + 1 : index + 3]
            try:
                out.append(chr(int(code, 16)))
            except ValueError as exc:
                raise GridError("MalformedPayload", f"bad escape %{code}") from exc
            index += 3
        else:
            out.append(char)
            index += 1
    return "".join(out)


@dataclass
class Payload:
    type: str
    correlation_id: int
    headers: Dict[str, str] = field(default_factory=dict)
    body: bytes = b""

    def encode(self) -> bytes:
        if self.type not in FRAME_TYPES:
            raise GridError("MalformedPayload", f"unknown frame type {self.type!r}")
        lines = [f"{MGP_VERSION} {self.type} {self.correlation_id}"]
        for key, value in self.headers.items():
            if not key or any(ch in key for ch in "=\r\n%"):
                raise GridError("MalformedPayload", f"bad header name {key!r}")
            lines.append(f"{key}={_escape(str(value))}")
        text = "\n".join(lines) + "\n\n"
        if self.body:
            text += base64.b64encode(self.body).decode("ascii")
        return text.encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "Payload":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GridError("MalformedPayload", "payload is not UTF-8") from exc
        head, sep, body_text = text.partition("\n\n")
        if not sep:
            raise GridError("MalformedPayload", "missing blank line after headers")
        lines = head.split("\n")
        first = lines[0].split(" ")
        if len(first) != 3 or first[0] != MGP_VERSION or first[1] not in FRAME_TYPES:
            raise GridError("MalformedPayload", f"bad start line {lines[0]!r}")
        try:
            correlation_id = int(first[2])
        except ValueError as exc:
            raise GridError("MalformedPayload", "correlation id is not an integer") from exc
        headers: Dict[str, str] = {}
        for line in lines[1:]:
            key, eq, value = line.partition("=")
            if not eq or not key:
                raise GridError("MalformedPayload", f"bad header line {line!r}")
            headers[key] = _unescape(value)
        try:
            body = base64.b64decode(body_text, validate=True) if body_text else b""
        except (binascii.Error, ValueError) as exc:
            raise GridError("MalformedPayload", "body is not base64") from exc
        return cls(first[1], correlation_id, headers, body)


def mac(key: bytes, payload: bytes) -> bytes:
    return hmac.new(key, payload, hashlib.sha256).digest()


def encode_frame(payload: Payload, key: bytes) -> bytes:
    raw = payload.encode()
    length = len(raw) + MAC_BYTES
    if length > MAX_FRAME_BYTES:
        raise GridError("Oversize", f"frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
    return _LENGTH.pack(length) + raw + mac(key, raw)


def split_frame(frame: bytes) -> Tuple[bytes, bytes]:
    if len(frame) < _LENGTH.size:
        raise GridError("MalformedPayload", "frame shorter than its length prefix")
    (length,) = _LENGTH.unpack_from(frame, 0)
    if length > MAX_FRAME_BYTES:
        raise GridError("Oversize", f"frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
    if length < MAC_BYTES or len(frame) != _LENGTH.size + length:
        raise GridError("MalformedPayload", "frame length does not match its prefix")
    body = frame[_LENGTH.size :]
    return body[:-MAC_BYTES], body[-MAC_BYTES:]


def decode_frame(frame: bytes, key: bytes) -> Payload:
    """Verify the MAC, then parse. Tampering is reported before any parsing."""
    raw, tag = split_frame(frame)
    if not hmac.compare_digest(mac(key, raw), tag):
        raise GridError("MacMismatch", "frame authentication failed")
    return Payload.decode(raw)


def read_frame(stream) -> Optional[bytes]:
    """Read one whole frame from a binary stream; None on clean EOF."""
    prefix = stream.read(_LENGTH.size)
    if not prefix:
        return None
    if len(prefix) < _LENGTH.size:
        raise GridError("ChannelClosed", "connection closed inside a frame header")
    (length,) = _LENGTH.unpack(prefix)
    if length > MAX_FRAME_BYTES:
        raise GridError("Oversize", f"frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
    body = stream.read(length)
    if len(body) < length:
        raise GridError("ChannelClosed", "connection closed inside a frame")
    return prefix + body


# handshake


def handshake_proof(
    secret: bytes, role: str, nonce_i: bytes, nonce_r: bytes, initiator: str, responder: str
) -> bytes:
    message = b"|".join(
        [
            role.encode("ascii"),
            nonce_i,
            nonce_r,
            initiator.encode("utf-8"),
            responder.encode("utf-8"),
        ]
    )
    return mac(secret, message)


def channel_key(proof_i: bytes, proof_r: bytes, nonce_i: bytes, nonce_r: bytes) -> bytes:
    return mac(proof_i + proof_r, nonce_i + nonce_r)


class HostKeyring:
    """Pre-shared host secrets; file lines are ``HOST <host_id> <base64 secret>``."""

    def __init__(self, secrets_by_host: Optional[Dict[str, bytes]] = None):
        self._secrets: Dict[str, bytes] = dict(secrets_by_host or {})
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"HostKeyring(hosts={sorted(self._secrets)})"

    def has(self, host: str) -> bool:
        with self._lock:
            return host in self._secrets

    def secret(self, host: str) -> bytes:
        with self._lock:
            value = self._secrets.get(host)
        if value is None:
            raise GridError("UnknownHost", f"host {host} is not in the keyring")
        return value

    def add(self, host: str, secret: bytes):
        if len(secret) != 32:
            raise GridError("BadConfig", f"secret for {host} must be 32 bytes")
        with self._lock:
            self._secrets[host] = secret

    def remove(self, host: str):
        with self._lock:
            self._secrets.pop(host, None)

    def hosts(self) -> List[str]:
        with self._lock:
            return sorted(self._secrets)

    def dumps(self) -> str:
        with self._lock:
            items = sorted(self._secrets.items())
        return "".join(
            f"HOST {host} {base64.b64encode(secret).decode('ascii')}\n" for host, secret in items
        )

    @classmethod
    def loads(cls, text: str) -> "HostKeyring":
        keyring = cls()
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] != "HOST":
                raise GridError("BadConfig", f"keyring line {number} is malformed")
            try:
                secret = base64.b64decode(parts[2], validate=True)
            except (binascii.Error, ValueError) as exc:
                raise GridError("BadConfig", f"keyring line {number} secret is not base64") from exc
            keyring.add(parts[1], secret)
        return keyring

    @classmethod
    def load(cls, path: str) -> "HostKeyring":
        try:
            with open(path, "r", encoding="utf-8") as file_obj:
                return cls.loads(file_obj.read())
        except OSError as exc:
            raise GridError("BadConfig", f"cannot read keyring {path}: {exc}") from exc

    def save(self, path: str):
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as file_obj:
            file_obj.write(self.dumps())
