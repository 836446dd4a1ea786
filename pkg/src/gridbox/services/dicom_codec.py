"""MGD1 codec: a canonical explicit-VR subset of the DICOM tag/value model.

Layout (all integers big-endian)::

    "MGD1" | count:u32 | { group:u16 element:u16 vr:2s length:u32 value }*

Text values are UTF-8, US values are two bytes, OB values are raw.
"""

import re
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union

from gridbox.constants import MGD_MAGIC
from gridbox.errors import GridError

Value = Union[str, int, bytes]

TEXT_VRS = frozenset({"PN", "LO", "DA", "UI", "CS"})
VALID_VRS = TEXT_VRS | {"US", "OB"}

_HEADER = struct.Struct(">4sI")
_ELEMENT = struct.Struct(">HH2sI")
_DA_RE = re.compile(r"^[0-9]{8}$")
_UI_RE = re.compile(r"^[0-9]+(\.[0-9]+)*$")


@dataclass(frozen=True, order=True)
class TagKey:
    group: int
    element: int

    def __str__(self) -> str:
        return f"({self.group:04X},{self.element:04X})"

    @classmethod
    def parse(cls, text: str) -> "TagKey":
        match = re.fullmatch(r"\(([0-9A-Fa-f]{4}),([0-9A-Fa-f]{4})\)", text.strip())
        if not match:
            raise ValueError(f"not a tag key: {text!r}")
        return cls(int(match.group(1), 16), int(match.group(2), 16))


@dataclass(frozen=True)
class DataElement:
    tag: TagKey
    vr: str
    value: Value


@dataclass(frozen=True)
class DataSet:
    elements: Tuple[DataElement, ...] = ()

    @classmethod
    def of(cls, elements: Iterable[DataElement]) -> "DataSet":
        """Build a DataSet from elements in any order."""
        return cls(tuple(sorted(elements, key=lambda item: item.tag)))

    def get(self, tag: TagKey) -> Optional[DataElement]:
        for element in self.elements:
            if element.tag == tag:
                return element
        return None

    def value(self, tag: TagKey) -> Optional[Value]:
        element = self.get(tag)
        return None if element is None else element.value

    def tags(self) -> List[TagKey]:
        return [element.tag for element in self.elements]

    def with_element(self, element: DataElement) -> "DataSet":
        kept = [item for item in self.elements if item.tag != element.tag]
        return DataSet.of(kept + [element])

    def without(self, tag: TagKey) -> "DataSet":
        return DataSet(tuple(item for item in self.elements if item.tag != tag))

    def restricted_to(self, tags: Iterable[TagKey]) -> "DataSet":
        wanted = set(tags)
        return DataSet(tuple(item for item in self.elements if item.tag in wanted))


@dataclass(frozen=True)
class TagSpec:
    tag: TagKey
    vr: str
    keyword: str
    mandatory: bool


SOP_INSTANCE_UID = TagKey(0x0008, 0x0018)
STUDY_DATE = TagKey(0x0008, 0x0020)
MODALITY = TagKey(0x0008, 0x0060)
INSTITUTION_NAME = TagKey(0x0008, 0x0080)
PATIENT_NAME = TagKey(0x0010, 0x0010)
PATIENT_ID = TagKey(0x0010, 0x0020)
BIRTH_DATE = TagKey(0x0010, 0x0030)
ENCRYPTED_BIRTH_DATE = TagKey(0x0011, 0x0010)
ENCRYPTED_PATIENT_ID = TagKey(0x0011, 0x0011)
VIEW_POSITION = TagKey(0x0018, 0x5101)
STUDY_INSTANCE_UID = TagKey(0x0020, 0x000D)
SERIES_INSTANCE_UID = TagKey(0x0020, 0x000E)
LATERALITY = TagKey(0x0020, 0x0060)
ROWS = TagKey(0x0028, 0x0010)
COLUMNS = TagKey(0x0028, 0x0011)
PIXEL_DATA = TagKey(0x7FE0, 0x0010)

TAG_DICTIONARY: Dict[TagKey, TagSpec] = {
    spec.tag: spec
    for spec in (
        TagSpec(SOP_INSTANCE_UID, "UI", "SOPInstanceUID", True),
        TagSpec(STUDY_DATE, "DA", "StudyDate", True),
        TagSpec(MODALITY, "CS", "Modality", True),
        TagSpec(INSTITUTION_NAME, "LO", "InstitutionName", False),
        TagSpec(PATIENT_NAME, "PN", "PatientName", True),
        TagSpec(PATIENT_ID, "LO", "PatientID", True),
        TagSpec(BIRTH_DATE, "DA", "PatientBirthDate", True),
        TagSpec(ENCRYPTED_BIRTH_DATE, "LO", "EncryptedBirthDate", False),
        TagSpec(ENCRYPTED_PATIENT_ID, "LO", "EncryptedPatientID", False),
        TagSpec(VIEW_POSITION, "CS", "ViewPosition", True),
        TagSpec(STUDY_INSTANCE_UID, "UI", "StudyInstanceUID", True),
        TagSpec(SERIES_INSTANCE_UID, "UI", "SeriesInstanceUID", True),
        TagSpec(LATERALITY, "CS", "Laterality", True),
        TagSpec(ROWS, "US", "Rows", True),
        TagSpec(COLUMNS, "US", "Columns", True),
        TagSpec(PIXEL_DATA, "OB", "PixelData", True),
    )
}

MANDATORY_TAGS: Tuple[TagKey, ...] = tuple(
    sorted(tag for tag, spec in TAG_DICTIONARY.items() if spec.mandatory)
)


@dataclass(frozen=True)
class ValidationIssue:
    severity: str
    tag: TagKey
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: Tuple[ValidationIssue, ...] = field(default_factory=tuple)

    @property
    def errors(self) -> List[ValidationIssue]:
        return [issue for issue in self.issues if issue.severity == "ERROR"]

    @property
    def warnings(self) -> List[ValidationIssue]:
        return [issue for issue in self.issues if issue.severity == "WARNING"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def summary(self) -> str:
        return "; ".join(f"{i.severity} {i.tag} {i.message}" for i in self.issues)


def value_problem(vr: str, value: Value) -> Optional[str]:
    """Return why ``value`` does not conform to ``vr``, or None."""
    if vr not in VALID_VRS:
        return f"unknown VR {vr!r}"
    if vr in TEXT_VRS:
        if not isinstance(value, str):
            return f"{vr} value must be text"
        if vr == "DA" and not _DA_RE.match(value):
            return "DA value must be 8 digits YYYYMMDD"
        if vr == "UI" and (not _UI_RE.match(value) or len(value) > 64):
            return "UI value must be dotted decimal"
        return None
    if vr == "US":
        if isinstance(value, bool) or not isinstance(value, int):
            return "US value must be an integer"
        if not 0 <= value <= 0xFFFF:
            return "US value must fit 16 bits"
        return None
    if not isinstance(value, (bytes, bytearray)):
        return "OB value must be bytes"
    return None


def _encode_value(element: DataElement) -> bytes:
    if element.vr not in VALID_VRS:
        raise GridError("BadVR", f"{element.tag} has unknown VR {element.vr!r}")
    if element.vr == "US":
        value = element.value
        if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 0xFFFF:
            raise GridError("InvariantViolation", f"{element.tag} US value out of range")
        return struct.pack(">H", value)
    if element.vr == "OB":
        if not isinstance(element.value, (bytes, bytearray)):
            raise GridError("InvariantViolation", f"{element.tag} OB value must be bytes")
        return bytes(element.value)
    if not isinstance(element.value, str):
        raise GridError("InvariantViolation", f"{element.tag} {element.vr} value must be text")
    return element.value.encode("utf-8")


def serialize(ds: DataSet) -> bytes:
    previous: Optional[TagKey] = None
    chunks = [_HEADER.pack(MGD_MAGIC, len(ds.elements))]
    for element in ds.elements:
        if previous is not None and element.tag <= previous:
            raise GridError(
                "InvariantViolation",
                f"tags must be strictly increasing: {element.tag} after {previous}",
            )
        previous = element.tag
        raw = _encode_value(element)
        chunks.append(
            _ELEMENT.pack(
                element.tag.group, element.tag.element, element.vr.encode("ascii"), len(raw)
            )
        )
        chunks.append(raw)
    return b"".join(chunks)


def parse(data: bytes) -> DataSet:
    if len(data) < _HEADER.size or data[:4] != MGD_MAGIC:
        raise GridError("MalformedHeader", "missing MGD1 magic")
    _, count = _HEADER.unpack_from(data, 0)
    offset = _HEADER.size
    elements: List[DataElement] = []
    previous: Optional[TagKey] = None

    for index in range(count):
        if offset + _ELEMENT.size > len(data):
            raise GridError("TruncatedElement", f"element {index} header is truncated")
        group, elem, raw_vr, length = _ELEMENT.unpack_from(data, offset)
        offset += _ELEMENT.size
        tag = TagKey(group, elem)
        try:
            vr = raw_vr.decode("ascii")
        except UnicodeDecodeError as exc:
            raise GridError("BadVR", f"{tag} has a non-ASCII VR") from exc
        if vr not in VALID_VRS:
            raise GridError("BadVR", f"{tag} has unknown VR {vr!r}")
        if offset + length > len(data):
            raise GridError("TruncatedElement", f"{tag} value is truncated")
        raw = data[offset : offset + length]
        offset += length

        if previous is not None and tag <= previous:
            raise GridError("TagOrderViolation", f"{tag} follows {previous}")
        previous = tag

        value: Value
        if vr == "US":
            if length != 2:
                raise GridError("BadVR", f"{tag} US value must be 2 bytes, got {length}")
            value = struct.unpack(">H", raw)[0]
        elif vr == "OB":
            value = bytes(raw)
        else:
            try:
                value = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise GridError("BadVR", f"{tag} {vr} value is not UTF-8") from exc
        elements.append(DataElement(tag, vr, value))

    if offset != len(data):
        raise GridError("TruncatedElement", f"{len(data) - offset} trailing bytes after elements")
    return DataSet(tuple(elements))


def validate(ds: DataSet) -> ValidationReport:
    issues: List[ValidationIssue] = []
    seen = set()
    previous: Optional[TagKey] = None

    for element in ds.elements:
        if element.tag in seen:
            issues.append(ValidationIssue("ERROR", element.tag, "duplicate tag"))
        elif previous is not None and element.tag < previous:
            issues.append(ValidationIssue("ERROR", element.tag, "tag out of order"))
        seen.add(element.tag)
        previous = element.tag

        spec = TAG_DICTIONARY.get(element.tag)
        if spec is None:
            issues.append(ValidationIssue("WARNING", element.tag, "unknown tag"))
            problem = value_problem(element.vr, element.value)
        elif element.vr != spec.vr:
            problem = f"{spec.keyword} must have VR {spec.vr}, got {element.vr}"
        else:
            problem = value_problem(element.vr, element.value)
        if problem:
            issues.append(ValidationIssue("ERROR", element.tag, problem))

    for tag in MANDATORY_TAGS:
        if tag not in seen:
            keyword = TAG_DICTIONARY[tag].keyword
            issues.append(ValidationIssue("ERROR", tag, f"missing mandatory {keyword}"))

    issues.sort(key=lambda issue: (issue.tag, issue.severity, issue.message))
    return ValidationReport(tuple(issues))
