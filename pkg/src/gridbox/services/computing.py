"""Computing element: turns an assigned job into a local run and stores its output."""

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

from gridbox.errors import GridError
from gridbox.models import PhysicalLocation
from gridbox.services.algorithms import AlgorithmRegistry
from gridbox.services.jdl import JobDescriptor
from gridbox.services.storage import StorageElement

# lfn -> object key of a replica on this CE's storage element, or None
Locator = Callable[[str], Optional[str]]
# (lfn, location, size, checksum) -> None
OutputRegistrar = Callable[[str, PhysicalLocation, int, str], None]


@dataclass(frozen=True)
class RunRecord:
    task_id: str
    executable: str
    object_keys: Tuple[str, ...]
    output_lfn: str


@dataclass(frozen=True)
class RunResult:
    task_id: str
    output_lfn: str
    object_key: str
    checksum: str
    size: int


class ComputingElement:
    def __init__(
        self,
        ce_id: str,
        storage: StorageElement,
        registry: AlgorithmRegistry,
        logger,
    ):
        self.ce_id = ce_id
        self.storage = storage
        self.registry = registry
        self.logger = logger

    def translate(self, task_id: str, descriptor: JobDescriptor, locate: Locator) -> RunRecord:
        keys: List[str] = []
        for lfn in descriptor.input_data:
            object_key = locate(lfn)
            if object_key is None or not self.storage.has(object_key):
                raise GridError("InputMissing", f"{lfn} has no replica at {self.storage.se_id}")
            keys.append(object_key)
        return RunRecord(task_id, descriptor.executable, tuple(keys), descriptor.output_lfn)

    def execute(self, record: RunRecord, owner_vo: str, register: OutputRegistrar) -> RunResult:
        try:
            inputs = [self.storage.get(key) for key in record.object_keys]
        except GridError as exc:
            raise GridError("InputMissing", exc.message) from exc
        output = self.registry.run(record.executable, inputs)
        object_key = f"out-{record.task_id}"
        checksum = self.storage.put(
            object_key, output, owner_vo, provenance=f"task:{record.task_id}"
        )
        if record.output_lfn:
            location = PhysicalLocation(self.storage.se_id, object_key)
            try:
                register(record.output_lfn, location, len(output), checksum)
            except GridError:
                self.storage.delete(object_key)
                raise
        self.logger.info("%s finished %s -> %s", self.ce_id, record.task_id, record.output_lfn)
        return RunResult(record.task_id, record.output_lfn, object_key, checksum, len(output))
