import pytest

from gridbox.errors import GridError
from gridbox.services.catalog_query import And, Not, Or, Predicate, evaluate
from gridbox.services.fixtures import (
    FIXTURE_QUERY_YEAR,
    QUERY_SUITE,
    clinical_attrs,
    matches,
    synthetic_records,
)
from gridbox.services.query_language import (
    BoolOp,
    Comparison,
    Negation,
    parse_query,
    render,
    tokenize,
    translate,
)


def test_parse_builds_left_folded_tree():
    ast = parse_query('laterality = "L" AND view = "CC" OR patient_age > 70')

    assert ast == BoolOp(
        "OR",
        BoolOp("AND", Comparison("laterality", "=", "L"), Comparison("view", "=", "CC")),
        Comparison("patient_age", ">", 70),
    )


def test_parse_handles_negation_and_parentheses():
    ast = parse_query('NOT (view = "MLO" OR site = "oxford")')

    assert ast == Negation(
        BoolOp("OR", Comparison("view", "=", "MLO"), Comparison("site", "=", "oxford"))
    )


def test_dates_parse_bare_or_quoted():
    assert parse_query("study_date >= 2002-01-01") == Comparison("study_date", ">=", "2002-01-01")
    assert parse_query('study_date < "2001-06-30"') == Comparison("study_date", "<", "2001-06-30")


def test_string_escapes_are_unquoted():
    tokens = tokenize(r'site = "ox\"ford"')

    assert tokens[2].value == 'ox"ford'


@pytest.mark.parametrize(
    "text,position",
    [
        ("", 0),
        ('laterality "L"', 11),
        ('laterality = "L" AND', 20),
        ('(view = "CC"', 12),
        ('view = "CC" )', 12),
        ("view = #", 7),
    ],
)
def test_syntax_errors_carry_a_position(text, position):
    with pytest.raises(GridError) as exc:
        parse_query(text)

    assert exc.value.code == "SyntaxError"
    assert exc.value.position == position


def test_unknown_attribute_is_rejected():
    with pytest.raises(GridError) as exc:
        parse_query('patient_name = "DOE^JANE"')
    assert exc.value.code == "UnknownAttribute"


def test_literal_types_are_checked():
    with pytest.raises(GridError) as exc:
        parse_query('patient_age > "sixty"')
    assert exc.value.code == "TypeError"
    with pytest.raises(GridError) as exc:
        parse_query("laterality = 1")
    assert exc.value.code == "TypeError"
    with pytest.raises(GridError) as exc:
        parse_query("study_date = 2003-02-30")
    assert exc.value.code == "TypeError"


def test_lowercase_keywords_are_not_keywords():
    with pytest.raises(GridError) as exc:
        parse_query('view = "CC" and site = "oxford"')
    assert exc.value.code == "SyntaxError"


def test_age_translates_to_birth_year_range():
    assert translate(parse_query("patient_age >= 60"), 2004) == Predicate("birth_year", "<=", 1944)
    assert translate(parse_query("patient_age < 45"), 2004) == Predicate("birth_year", ">", 1959)
    assert translate(parse_query("patient_age = 55"), 2004) == Predicate("birth_year", "=", 1949)


def test_translate_keeps_boolean_structure():
    query = translate(parse_query('NOT laterality = "L" AND site != "udine"'), 2004)

    assert query == And((Not(Predicate("laterality", "=", "L")), Predicate("site", "!=", "udine")))
    assert translate(parse_query('view = "CC" OR view = "MLO"'), 2004) == Or(
        (Predicate("view", "=", "CC"), Predicate("view", "=", "MLO"))
    )


def test_render_parses_back_to_the_same_tree():
    for text in QUERY_SUITE:
        ast = parse_query(text)
        assert parse_query(render(ast)) == ast


def test_translation_agrees_with_direct_evaluation():
    records = synthetic_records(60)
    for text in QUERY_SUITE:
        ast = parse_query(text)
        query = translate(ast, FIXTURE_QUERY_YEAR)
        for record in records:
            attrs = clinical_attrs(record.dataset)
            assert evaluate(query, attrs) == matches(ast, attrs, FIXTURE_QUERY_YEAR), text
