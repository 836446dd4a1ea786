import pytest

from gridbox.errors import GridError
from gridbox.services.federation import DENIED, OK, UNREACHABLE, ResultRow, ResultSet, merge


def row(guid: str, lfn: str, origin_vo: str, **attrs) -> ResultRow:
    return ResultRow(guid, lfn, origin_vo, tuple(sorted(attrs.items())))


def test_merge_sorts_and_keeps_per_vo_status():
    result = merge(
        [
            ("udine", OK, [row("g3", "/mg/udine/c.mgd", "udine")]),
            (
                "oxford",
                OK,
                [row("g2", "/mg/oxford/b.mgd", "oxford"), row("g1", "/mg/oxford/a.mgd", "oxford")],
            ),
            ("cambridge", UNREACHABLE, []),
        ],
        denied=["central"],
    )

    assert result.lfns() == ["/mg/oxford/a.mgd", "/mg/oxford/b.mgd", "/mg/udine/c.mgd"]
    assert result.statuses == {
        "cambridge": UNREACHABLE,
        "central": DENIED,
        "oxford": OK,
        "udine": OK,
    }
    assert result.counts["oxford"] == 2


def test_merge_deduplicates_by_guid_preferring_the_owner():
    owner_row = row("g1", "/mg/oxford/a.mgd", "oxford", view="CC")
    copy_row = row("g1", "/mg/oxford/a.mgd", "oxford", view="MLO")

    result = merge([("cambridge", OK, [copy_row]), ("oxford", OK, [owner_row])])

    assert result.rows == [owner_row]


def test_rendered_result_set_parses_back():
    found = row("g1", "/mg/oxford/a b.mgd", "oxford", site="ox|ford", birth_year=1954)
    result = merge([("oxford", OK, [found])])
    text = result.render()

    assert text.splitlines()[0] == "MGRS/1 rows=1"
    parsed = ResultSet.parse(text)
    assert parsed.lfns() == ["/mg/oxford/a b.mgd"]
    assert parsed.rows[0].attr_map() == {"birth_year": "1954", "site": "ox|ford"}
    assert result.summary_lines() == ["# vo=oxford status=OK rows=1"]


def test_parse_requires_the_header():
    with pytest.raises(GridError) as exc:
        ResultSet.parse("rows=0\n")
    assert exc.value.code == "MalformedPayload"


def test_privacy_violations_spot_identifiers():
    clean = ResultSet([row("g1", "/mg/a", "oxford", pseudonym="PSN:abcd", birth_year=1954)])
    leaky = ResultSet([row("g2", "/mg/b", "oxford", name="DOE^JANE", pseudonym="P001")])

    assert clean.privacy_violations() == []
    assert leaky.privacy_violations() == ["/mg/b:name", "/mg/b:pseudonym"]
