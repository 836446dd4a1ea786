import pytest

from gridbox.errors import GridError
from gridbox.models import PhysicalLocation
from gridbox.services.catalog import FileCatalog, ancestors, is_under, normalize_lfn
from gridbox.services.catalog_query import And, Not, Or, Predicate, evaluate, from_dict, to_dict

SCHEMA = {"birth_year": "INT", "laterality": "TEXT", "study_date": "DATE"}


class DummyLogger:
    def info(self, *_args, **_kwargs):
        return None

    def debug(self, *_args, **_kwargs):
        return None


def build_catalog(guids=None) -> FileCatalog:
    issued = iter(guids or [f"guid-{n}" for n in range(1, 100)])
    catalog = FileCatalog(DummyLogger(), guid_factory=lambda: next(issued))
    catalog.ensure_dirs("/mg/oxford")
    catalog.attach_schema("/mg", SCHEMA)
    return catalog


def location(name: str = "oxford:se", key: str = "obj") -> PhysicalLocation:
    return PhysicalLocation(name, key)


def test_normalize_lfn_rejects_relative_and_empty_segments():
    assert normalize_lfn("/mg/oxford/a.mgd") == "/mg/oxford/a.mgd"
    for bad in ("mg/oxford", "/mg//oxford", "/mg/ox ford", "/mg/../etc"):
        with pytest.raises(GridError) as exc:
            normalize_lfn(bad)
        assert exc.value.code == "BadName"


def test_ancestors_and_is_under():
    assert ancestors("/mg/oxford/a") == ["/mg/oxford/a", "/mg/oxford", "/mg", "/"]
    assert is_under("/mg/oxford/a", "/mg")
    assert not is_under("/mgx/a", "/mg")


def test_register_needs_parent_and_unique_name():
    catalog = build_catalog()

    guid = catalog.register_file("/mg/oxford/a.mgd", location(), 10, "sum", "mg")

    assert guid == "guid-1"
    assert catalog.lookup("/mg/oxford/a.mgd").replicas == [location()]
    with pytest.raises(GridError) as exc:
        catalog.register_file("/mg/oxford/a.mgd", location(), 10, "sum", "mg")
    assert exc.value.code == "AlreadyExists"
    with pytest.raises(GridError) as exc:
        catalog.register_file("/mg/udine/b.mgd", location(), 10, "sum", "mg")
    assert exc.value.code == "ParentMissing"


def test_guid_collisions_are_reissued():
    catalog = build_catalog(["g1", "g1", "g2"])

    first = catalog.register_file("/mg/oxford/a.mgd", location(), 1, "s", "mg")
    second = catalog.register_file("/mg/oxford/b.mgd", location(), 1, "s", "mg")

    assert (first, second) == ("g1", "g2")


def test_new_version_keeps_guid_and_history():
    catalog = build_catalog()
    catalog.register_file("/mg/oxford/a.mgd", location(key="v1"), 1, "s1", "mg")

    version = catalog.new_version("/mg/oxford/a.mgd", location(key="v2"), 2, "s2")

    assert version == 2
    assert catalog.versions("/mg/oxford/a.mgd") == [1, 2]
    assert catalog.lookup("/mg/oxford/a.mgd").checksum == "s2"
    assert catalog.lookup("/mg/oxford/a.mgd", 1).replicas == [location(key="v1")]
    assert catalog.lookup("/mg/oxford/a.mgd", 2).guid == catalog.lookup("/mg/oxford/a.mgd").guid


def test_add_replica_verifies_checksum_and_rejects_duplicates():
    catalog = build_catalog()
    catalog.register_file("/mg/oxford/a.mgd", location(), 1, "good", "mg")
    other = location("cern:se", "obj")

    with pytest.raises(GridError) as exc:
        catalog.add_replica("/mg/oxford/a.mgd", other, verifier=lambda _loc: "bad")
    assert exc.value.code == "ChecksumMismatch"

    catalog.add_replica("/mg/oxford/a.mgd", other, verifier=lambda _loc: "good")
    assert catalog.lookup("/mg/oxford/a.mgd").replicas == sorted([location(), other])

    with pytest.raises(GridError) as exc:
        catalog.add_replica("/mg/oxford/a.mgd", other)
    assert exc.value.code == "DuplicateReplica"


def test_schema_conflicts_and_typed_attributes():
    catalog = build_catalog()
    catalog.register_file("/mg/oxford/a.mgd", location(), 1, "s", "mg")

    with pytest.raises(GridError) as exc:
        catalog.attach_schema("/mg/oxford", {"other": "TEXT"})
    assert exc.value.code == "SchemaConflict"
    with pytest.raises(GridError) as exc:
        catalog.set_attrs("/mg/oxford/a.mgd", {"birth_year": "1950"})
    assert exc.value.code == "TypeMismatch"
    with pytest.raises(GridError) as exc:
        catalog.set_attrs("/mg/oxford/a.mgd", {"colour": "red"})
    assert exc.value.code == "UnknownAttribute"

    catalog.set_attrs("/mg/oxford/a.mgd", {"birth_year": 1950, "study_date": "2003-04-15"})
    assert catalog.lookup("/mg/oxford/a.mgd").attrs["birth_year"] == 1950


def test_find_filters_by_prefix_and_query():
    catalog = build_catalog()
    catalog.ensure_dirs("/mg/udine")
    for lfn, year, side in (
        ("/mg/oxford/a.mgd", 1950, "L"),
        ("/mg/oxford/b.mgd", 1960, "R"),
        ("/mg/udine/c.mgd", 1945, "L"),
    ):
        catalog.register_file(lfn, location(), 1, "s", "mg")
        catalog.set_attrs(lfn, {"birth_year": year, "laterality": side})

    left = Predicate("laterality", "=", "L")
    older = Predicate("birth_year", "<", 1955)

    assert catalog.find("/mg", left) == ["/mg/oxford/a.mgd", "/mg/udine/c.mgd"]
    assert catalog.find("/mg/oxford", And((left, older))) == ["/mg/oxford/a.mgd"]
    assert catalog.find("/mg", Not(left)) == ["/mg/oxford/b.mgd"]
    assert catalog.find("/algorithms", left) == []
    with pytest.raises(GridError) as exc:
        catalog.find("/mg", Predicate("birth_year", "=", "old"))
    assert exc.value.code == "TypeMismatch"


def test_evaluate_treats_missing_attributes_as_false():
    query = Or((Predicate("laterality", "=", "L"), Predicate("birth_year", ">", 1900)))

    assert not evaluate(query, {})
    assert evaluate(query, {"birth_year": 1950})
    assert from_dict(to_dict(query)) == query


def test_unregister_rolls_back_an_entry():
    catalog = build_catalog()
    catalog.register_file("/mg/oxford/a.mgd", location(), 1, "s", "mg")

    catalog.unregister("/mg/oxford/a.mgd")

    assert not catalog.exists("/mg/oxford/a.mgd")
    with pytest.raises(GridError) as exc:
        catalog.lookup("/mg/oxford/a.mgd")
    assert exc.value.code == "NotFound"


def test_catalog_survives_restart_from_journal_and_snapshot(tmp_path):
    state_dir = str(tmp_path / "state")
    catalog = FileCatalog.open(state_dir, DummyLogger())
    catalog.ensure_dirs("/mg/oxford")
    catalog.attach_schema("/mg", SCHEMA)
    catalog.register_file("/mg/oxford/a.mgd", location(), 1, "s", "mg", guid="g-a")
    catalog.set_attrs("/mg/oxford/a.mgd", {"laterality": "L"})

    reopened = FileCatalog.open(state_dir, DummyLogger())
    assert reopened.lookup("/mg/oxford/a.mgd").attrs == {"laterality": "L"}

    reopened.snapshot()
    reopened.new_version("/mg/oxford/a.mgd", location(key="v2"), 2, "s2")

    restored = FileCatalog.open(state_dir, DummyLogger())
    assert restored.versions("/mg/oxford/a.mgd") == [1, 2]
    assert restored.lookup("/mg/oxford/a.mgd").guid == "g-a"
    assert [schema.dir for schema in restored.schemas()] == ["/mg"]
    assert restored.list_dir("/mg") == ["/mg/oxford"]
