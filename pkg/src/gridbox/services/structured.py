"""Translators between MGD1 DataSets and the structured (tree) record form."""

import base64
import binascii
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union
from urllib.parse import unquote

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.dicom_codec import DataElement, DataSet, TagKey

Leaf = Union[str, int]


@dataclass(frozen=True)
class LeafSpec:
    path: str
    tag: TagKey
    vr: str
    required: bool = True


LEAVES: Tuple[LeafSpec, ...] = (
    LeafSpec("patient.name", codec.PATIENT_NAME, "PN"),
    LeafSpec("patient.id", codec.PATIENT_ID, "LO"),
    LeafSpec("patient.birth_date", codec.BIRTH_DATE, "DA"),
    LeafSpec("study.uid", codec.STUDY_INSTANCE_UID, "UI"),
    LeafSpec("study.date", codec.STUDY_DATE, "DA"),
    LeafSpec("study.site", codec.INSTITUTION_NAME, "LO", required=False),
    LeafSpec("series.uid", codec.SERIES_INSTANCE_UID, "UI"),
    LeafSpec("series.modality", codec.MODALITY, "CS"),
    LeafSpec("series.laterality", codec.LATERALITY, "CS"),
    LeafSpec("series.view", codec.VIEW_POSITION, "CS"),
    LeafSpec("image.sop_uid", codec.SOP_INSTANCE_UID, "UI"),
    LeafSpec("image.rows", codec.ROWS, "US"),
    LeafSpec("image.cols", codec.COLUMNS, "US"),
    LeafSpec("image.pixel_ref", codec.PIXEL_DATA, "OB"),
)
_LEAVES_BY_PATH: Dict[str, LeafSpec] = {leaf.path: leaf for leaf in LEAVES}

INLINE_PREFIX = "base64:"
REFERENCE_PREFIXES = ("lfn:", "guid:")


@dataclass(frozen=True)
class StructuredRecord:
    """Named tree of text/integer leaves, flattened to dotted paths."""

    leaves: Dict[str, Leaf] = field(default_factory=dict)

    def get(self, path: str, default: Optional[Leaf] = None) -> Optional[Leaf]:
        return self.leaves.get(path, default)

    def section(self, name: str) -> Dict[str, Leaf]:
        prefix = f"{name}."
        return {
            path[len(prefix) :]: value
            for path, value in self.leaves.items()
            if path.startswith(prefix)
        }

    def render(self) -> str:
        lines = [
            f"{path}={_escape(str(value))}" for path, value in sorted(self.leaves.items())
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def parse_text(cls, text: str) -> "StructuredRecord":
        leaves: Dict[str, Leaf] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            path, sep, raw = line.partition("=")
            if not sep:
                raise GridError("BadLeafValue", f"line {number} has no '='")
            spec = _LEAVES_BY_PATH.get(path)
            if spec is None:
                raise GridError("BadLeafValue", f"unknown leaf {path!r}")
            value = unquote(raw)
            if spec.vr == "US":
                try:
                    leaves[path] = int(value)
                except ValueError as exc:
                    raise GridError("BadLeafValue", f"{path} must be an integer") from exc
            else:
                leaves[path] = value
        return cls(leaves)


def _escape(value: str) -> str:
    return value.replace("%", "%25").replace("\r", "%0D").replace("\n", "%0A")


def to_structured(ds: DataSet) -> StructuredRecord:
    report = codec.validate(ds)
    if not report.ok:
        raise GridError("IncompleteDataSet", report.summary())

    leaves: Dict[str, Leaf] = {}
    for spec in LEAVES:
        element = ds.get(spec.tag)
        if element is None:
            continue
        if spec.vr == "OB":
            raw = element.value if isinstance(element.value, bytes) else b""
            leaves[spec.path] = INLINE_PREFIX + base64.b64encode(raw).decode("ascii")
        else:
            leaves[spec.path] = element.value  # type: ignore[assignment]
    return StructuredRecord(leaves)


def _leaf_value(spec: LeafSpec, value: Leaf):
    if spec.vr == "US":
        if isinstance(value, bool) or not isinstance(value, int):
            raise GridError("BadLeafValue", f"{spec.path} must be an integer")
        return value
    if not isinstance(value, str):
        raise GridError("BadLeafValue", f"{spec.path} must be text")
    if spec.vr == "OB":
        if value.startswith(INLINE_PREFIX):
            try:
                return base64.b64decode(value[len(INLINE_PREFIX) :], validate=True)
            except (binascii.Error, ValueError) as exc:
                raise GridError("BadLeafValue", f"{spec.path} has invalid base64") from exc
        if value.startswith(REFERENCE_PREFIXES):
            return b""
        raise GridError("BadLeafValue", f"{spec.path} must be inline data or a reference")
    return value


def from_structured(rec: StructuredRecord) -> DataSet:
    unknown = sorted(set(rec.leaves) - set(_LEAVES_BY_PATH))
    if unknown:
        raise GridError("BadLeafValue", f"unknown leaves: {', '.join(unknown)}")

    elements: List[DataElement] = []
    for spec in LEAVES:
        if spec.path not in rec.leaves:
            if spec.required:
                raise GridError("MissingLeaf", f"missing leaf {spec.path}")
            continue
        value = _leaf_value(spec, rec.leaves[spec.path])
        problem = codec.value_problem(spec.vr, value)
        if problem:
            raise GridError("BadLeafValue", f"{spec.path}: {problem}")
        elements.append(DataElement(spec.tag, spec.vr, value))

    ds = DataSet.of(elements)
    report = codec.validate(ds)
    if not report.ok:
        raise GridError("BadLeafValue", report.summary())
    return ds
