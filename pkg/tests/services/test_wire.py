import io
import random
from pathlib import Path

import pytest

from gridbox.constants import MAX_FRAME_BYTES
from gridbox.errors import GridError
from gridbox.services.wire import (
    FRAME_TYPES,
    ZERO_KEY,
    HostKeyring,
    Payload,
    channel_key,
    decode_frame,
    encode_frame,
    handshake_proof,
    read_frame,
)

VECTOR_FILE = Path(__file__).resolve().parents[1] / "vectors" / "mgp_frame.hex"
HEADER_ALPHABET = "abcz09._-/ "
VALUE_ALPHABET = "abc=%\n\r é/:|"


def random_payload(rng: random.Random) -> Payload:
    headers = {}
    for _ in range(rng.randint(0, 6)):
        key = "".join(rng.choice(HEADER_ALPHABET) for _ in range(rng.randint(1, 10)))
        headers[key] = "".join(rng.choice(VALUE_ALPHABET) for _ in range(rng.randint(0, 24)))
    body = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
    return Payload(rng.choice(FRAME_TYPES), rng.randint(0, 2**31), headers, body)


def test_frame_round_trip_on_random_payloads():
    rng = random.Random(42)
    for _ in range(1000):
        key = bytes(rng.getrandbits(8) for _ in range(32))
        payload = random_payload(rng)
        assert decode_frame(encode_frame(payload, key), key) == payload


def test_pinned_vector_matches_zero_key_encoding():
    expected = bytes.fromhex(VECTOR_FILE.read_text(encoding="ascii").strip())
    payload = Payload("REQ", 42, {"op": "mi.query"})

    assert encode_frame(payload, ZERO_KEY) == expected
    assert decode_frame(expected, ZERO_KEY) == payload
    assert expected[4:].startswith(b"MGP/1 REQ 42\nop=mi.query\n\n")


def test_flipping_any_payload_byte_is_a_mac_mismatch():
    frame = encode_frame(Payload("RSP", 7, {"status": "ok"}, b"body"), ZERO_KEY)
    for index in range(4, len(frame)):
        tampered = bytearray(frame)
        tampered[index] ^= 0x01
        with pytest.raises(GridError) as exc:
            decode_frame(bytes(tampered), ZERO_KEY)
        assert exc.value.code == "MacMismatch"


def test_wrong_key_is_a_mac_mismatch():
    frame = encode_frame(Payload("REQ", 1), ZERO_KEY)

    with pytest.raises(GridError) as exc:
        decode_frame(frame, b"\x01" * 32)
    assert exc.value.code == "MacMismatch"


def test_length_prefix_must_match_frame():
    frame = encode_frame(Payload("REQ", 1), ZERO_KEY)

    with pytest.raises(GridError) as exc:
        decode_frame(frame + b"\x00", ZERO_KEY)
    assert exc.value.code == "MalformedPayload"


def test_oversize_prefix_is_refused_before_reading_body():
    prefix = (MAX_FRAME_BYTES + 1).to_bytes(4, "big")

    with pytest.raises(GridError) as exc:
        read_frame(io.BytesIO(prefix + b"x"))
    assert exc.value.code == "Oversize"


def test_read_frame_splits_a_stream():
    first = encode_frame(Payload("REQ", 1, {"op": "a"}), ZERO_KEY)
    second = encode_frame(Payload("REQ", 2, {"op": "b"}), ZERO_KEY)
    stream = io.BytesIO(first + second)

    assert read_frame(stream) == first
    assert read_frame(stream) == second
    assert read_frame(stream) is None


def test_read_frame_reports_truncation():
    frame = encode_frame(Payload("REQ", 1), ZERO_KEY)

    with pytest.raises(GridError) as exc:
        read_frame(io.BytesIO(frame[:-3]))
    assert exc.value.code == "ChannelClosed"


def test_payload_rejects_bad_start_line():
    with pytest.raises(GridError) as exc:
        Payload.decode(b"MGP/2 REQ 1\n\n")
    assert exc.value.code == "MalformedPayload"


def test_payload_rejects_bad_header_name():
    with pytest.raises(GridError) as exc:
        Payload("REQ", 1, {"a=b": "c"}).encode()
    assert exc.value.code == "MalformedPayload"


def test_handshake_proofs_bind_role_and_hosts():
    secret = b"\x07" * 32
    nonce_i, nonce_r = b"i" * 16, b"r" * 16
    initiator = handshake_proof(secret, "I", nonce_i, nonce_r, "ws.oxford", "oxford")

    assert initiator != handshake_proof(secret, "R", nonce_i, nonce_r, "ws.oxford", "oxford")
    assert initiator != handshake_proof(secret, "I", nonce_i, nonce_r, "ws.oxford", "udine")
    assert channel_key(initiator, b"x" * 32, nonce_i, nonce_r) != channel_key(
        initiator, b"x" * 32, nonce_r, nonce_i
    )


def test_keyring_dump_load_and_unknown_host(tmp_path):
    keyring = HostKeyring({"oxford": b"\x01" * 32, "cern": b"\x02" * 32})
    path = tmp_path / "hosts.keyring"
    keyring.save(str(path))

    loaded = HostKeyring.load(str(path))

    assert loaded.hosts() == ["cern", "oxford"]
    assert loaded.secret("oxford") == b"\x01" * 32
    assert (path.stat().st_mode & 0o777) == 0o600
    with pytest.raises(GridError) as exc:
        loaded.secret("udine")
    assert exc.value.code == "UnknownHost"


def test_keyring_rejects_short_secret_and_bad_lines():
    with pytest.raises(GridError):
        HostKeyring().add("oxford", b"short")
    with pytest.raises(GridError) as exc:
        HostKeyring.loads("HOST oxford\n")
    assert exc.value.code == "BadConfig"
