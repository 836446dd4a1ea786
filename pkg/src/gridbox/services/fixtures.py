"""Deterministic mammogram fixtures, the standard query suite and its brute-force oracle."""

import random
from dataclasses import dataclass
from datetime import date
from typing import Any, Dict, List, Mapping, Sequence, Set, Union

from gridbox.constants import DATA_ROOT
from gridbox.services import dicom_codec as codec
from gridbox.services.dicom_codec import DataElement, DataSet
from gridbox.services.query_language import (
    BoolOp,
    Comparison,
    Negation,
    QueryAST,
    parse_query,
)

FIXTURE_SITES = ("oxford", "cambridge", "udine")
FIXTURE_QUERY_YEAR = 2004
UID_ROOT = "1.2.826.0.1.3680043"

QUERY_SUITE = (
    'laterality = "L"',
    'laterality = "R"',
    'view = "CC"',
    'view = "MLO"',
    'modality = "MG"',
    'site = "oxford"',
    'site = "cambridge" OR site = "udine"',
    'site != "udine"',
    "patient_age >= 60",
    "patient_age < 45",
    "patient_age = 55",
    "patient_age > 40 AND patient_age <= 50",
    "study_date >= 2002-01-01",
    'study_date < "2001-06-30"',
    "study_date = 2003-03-03",
    'laterality = "L" AND view = "CC"',
    'NOT laterality = "L"',
    'NOT (view = "MLO" OR site = "oxford")',
    '(patient_age >= 50 OR view = "CC") AND site != "oxford"',
    'laterality = "R" AND patient_age < 60 AND study_date > 2000-12-31',
    'site = "udine" AND NOT view = "CC"',
    'modality != "MG"',
    'site = "nowhere"',
    'view = "MLO" AND laterality = "L" OR patient_age > 70',
    '(laterality = "L" OR laterality = "R") AND NOT site = "cambridge"',
)


@dataclass(frozen=True)
class FixtureRecord:
    lfn: str
    site: str
    dataset: DataSet

    @property
    def data(self) -> bytes:
        return codec.serialize(self.dataset)


def _dataset(
    name: str,
    patient_id: str,
    birth_date: str,
    study_date: str,
    laterality: str,
    view: str,
    uid_suffix: str,
    pixels: bytes,
    rows: int,
    cols: int,
    site: str = "",
) -> DataSet:
    elements = [
        DataElement(codec.SOP_INSTANCE_UID, "UI", f"{UID_ROOT}.3.{uid_suffix}"),
        DataElement(codec.STUDY_DATE, "DA", study_date),
        DataElement(codec.MODALITY, "CS", "MG"),
        DataElement(codec.PATIENT_NAME, "PN", name),
        DataElement(codec.PATIENT_ID, "LO", patient_id),
        DataElement(codec.BIRTH_DATE, "DA", birth_date),
        DataElement(codec.VIEW_POSITION, "CS", view),
        DataElement(codec.STUDY_INSTANCE_UID, "UI", f"{UID_ROOT}.1.{uid_suffix}"),
        DataElement(codec.SERIES_INSTANCE_UID, "UI", f"{UID_ROOT}.2.{uid_suffix}"),
        DataElement(codec.LATERALITY, "CS", laterality),
        DataElement(codec.ROWS, "US", rows),
        DataElement(codec.COLUMNS, "US", cols),
        DataElement(codec.PIXEL_DATA, "OB", pixels),
    ]
    if site:
        elements.append(DataElement(codec.INSTITUTION_NAME, "LO", site))
    return DataSet.of(elements)


def fixture_dataset() -> DataSet:
    """The reference mammogram: DOE^JANE, P001, born 1954-03-17."""
    return _dataset(
        name="DOE^JANE",
        patient_id="P001",
        birth_date="19540317",
        study_date="20030415",
        laterality="L",
        view="CC",
        uid_suffix="1",
        pixels=bytes(range(16)),
        rows=4,
        cols=4,
    )


def synthetic_dataset(i: int, site: str) -> DataSet:
    """Complete, valid mammogram number ``i`` of ``site``; same inputs give the same bytes."""
    rng = random.Random(f"mammogram|{site}|{i}")
    birth = date(rng.randint(1925, 1964), rng.randint(1, 12), rng.randint(1, 28))
    study = date(rng.randint(2000, 2004), rng.randint(1, 12), rng.randint(1, 28))
    side = rng.choice(("L", "R"))
    view = rng.choice(("CC", "MLO"))
    size = rng.choice((4, 8))
    pixels = bytes(rng.getrandbits(8) for _ in range(size * size))
    site_number = sum(ord(char) for char in site)
    return _dataset(
        name=f"{site.upper()}^PATIENT{i:03d}",
        patient_id=f"{site[:3].upper()}-{i:05d}",
        birth_date=birth.strftime("%Y%m%d"),
        study_date=study.strftime("%Y%m%d"),
        laterality=side,
        view=view,
        uid_suffix=f"{site_number}.{i}",
        pixels=pixels,
        rows=size,
        cols=size,
        site=site,
    )


def synthetic_records(count: int = 60, sites: Sequence[str] = FIXTURE_SITES) -> List[FixtureRecord]:
    """``count`` records dealt round-robin over ``sites``, each under ``/mg/<site>/``."""
    records = []
    for i in range(count):
        site = sites[i % len(sites)]
        lfn = f"{DATA_ROOT}/{site}/screening/img{i:03d}.mgd"
        records.append(FixtureRecord(lfn, site, synthetic_dataset(i, site)))
    return records


def clinical_attrs(ds: DataSet) -> Dict[str, Any]:
    """Queryable attributes read straight from an identified DataSet."""
    birth = str(ds.value(codec.BIRTH_DATE))
    study = str(ds.value(codec.STUDY_DATE))
    return {
        "birth_year": int(birth[:4]),
        "laterality": ds.value(codec.LATERALITY),
        "view": ds.value(codec.VIEW_POSITION),
        "study_date": f"{study[:4]}-{study[4:6]}-{study[6:8]}",
        "site": ds.value(codec.INSTITUTION_NAME),
        "modality": ds.value(codec.MODALITY),
    }


def _holds(op: str, value: Union[int, str], literal: Union[int, str]) -> bool:
    if op == "=":
        return value == literal
    if op == "!=":
        return value != literal
    if op == "<":
        return value < literal  # type: ignore[operator]
    if op == "<=":
        return value <= literal  # type: ignore[operator]
    if op == ">":
        return value > literal  # type: ignore[operator]
    return value >= literal  # type: ignore[operator]


def matches(ast: QueryAST, attrs: Mapping[str, Any], query_year: int) -> bool:
    """Evaluate a clinical AST directly, computing the patient's age in ``query_year``."""
    if isinstance(ast, Comparison):
        if ast.attr == "patient_age":
            return _holds(ast.op, query_year - attrs["birth_year"], ast.literal)
        return _holds(ast.op, attrs[ast.attr], ast.literal)
    if isinstance(ast, Negation):
        return not matches(ast.item, attrs, query_year)
    if isinstance(ast, BoolOp):
        left = matches(ast.left, attrs, query_year)
        right = matches(ast.right, attrs, query_year)
        return (left and right) if ast.op == "AND" else (left or right)
    raise TypeError(f"not a clinical query: {ast!r}")


def brute_force(
    records: Sequence[FixtureRecord], text: str, query_year: int = FIXTURE_QUERY_YEAR
) -> Set[str]:
    """LFNs of ``records`` matching ``text``, scanning every record."""
    ast = parse_query(text)
    return {
        record.lfn
        for record in records
        if matches(ast, clinical_attrs(record.dataset), query_year)
    }
