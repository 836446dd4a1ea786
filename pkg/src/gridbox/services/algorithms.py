"""Named algorithm plugins: deterministic functions from input bytes to output bytes."""

import hashlib
import threading
from typing import Callable, Dict, List, Sequence

from gridbox.errors import GridError
from gridbox.services import dicom_codec

Plugin = Callable[[Sequence[bytes]], bytes]

HISTOGRAM_BINS = 16


def checksum_plugin(inputs: Sequence[bytes]) -> bytes:
    return "".join(hashlib.sha256(data).hexdigest() + "\n" for data in inputs).encode("ascii")


def _pixel_bytes(data: bytes) -> bytes:
    try:
        ds = dicom_codec.parse(data)
    except GridError:
        return data
    pixels = ds.value(dicom_codec.PIXEL_DATA)
    return pixels if isinstance(pixels, bytes) else data


def histogram_plugin(inputs: Sequence[bytes]) -> bytes:
    lines = []
    for data in inputs:
        counts = [0] * HISTOGRAM_BINS
        for byte in _pixel_bytes(data):
            counts[byte * HISTOGRAM_BINS // 256] += 1
        lines.append(" ".join(str(count) for count in counts))
    return ("\n".join(lines) + "\n").encode("ascii")


def noop_cade_plugin(inputs: Sequence[bytes]) -> bytes:
    return f"noop-cade inputs={len(inputs)} findings=0\n".encode("ascii")


BUILTIN_PLUGINS: Dict[str, Plugin] = {
    "checksum": checksum_plugin,
    "histogram": histogram_plugin,
    "noop-cade": noop_cade_plugin,
}


def artifact_checksum(artifact: bytes) -> str:
    return hashlib.sha256(artifact).hexdigest()


class AlgorithmRegistry:
    """Plugins a node can run, selected by registered name."""

    def __init__(self, logger):
        self.logger = logger
        self._plugins: Dict[str, Plugin] = dict(BUILTIN_PLUGINS)
        self._lock = threading.Lock()

    def names(self) -> List[str]:
        with self._lock:
            return sorted(self._plugins)

    def knows(self, name: str) -> bool:
        with self._lock:
            return name in self._plugins

    def add_plugin(self, name: str, plugin: Plugin):
        with self._lock:
            self._plugins[name] = plugin

    def check_artifact(self, name: str, artifact: bytes, checksum: str):
        if not self.knows(name):
            raise GridError("UnknownPlugin", f"no built-in plugin named {name!r}")
        actual = artifact_checksum(artifact)
        if actual != checksum:
            raise GridError(
                "ChecksumMismatch", f"artifact for {name}: expected {checksum}, got {actual}"
            )

    def run(self, name: str, inputs: Sequence[bytes]) -> bytes:
        with self._lock:
            plugin = self._plugins.get(name)
        if plugin is None:
            raise GridError("UnknownAlgorithm", f"{name} is not available on this node")
        try:
            output = plugin(list(inputs))
        except GridError:
            raise
        except Exception as exc:  # noqa: BLE001
            self.logger.warning("Algorithm %s faulted: %s", name, exc)
            raise GridError("AlgorithmFault", f"{name}: {exc}") from exc
        if not isinstance(output, (bytes, bytearray)):
            raise GridError("AlgorithmFault", f"{name} returned {type(output).__name__}")
        return bytes(output)
