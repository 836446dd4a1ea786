"""Predicate trees evaluated against catalogue entry attributes."""

import re
from dataclasses import dataclass
from typing import Any, Dict, Iterator, Mapping, Tuple, Union

from gridbox.errors import GridError

COLUMN_TYPES = ("INT", "TEXT", "DATE", "FLOAT")
OPERATORS = ("=", "!=", "<", "<=", ">", ">=", "CONTAINS")

_DATE_RE = re.compile(r"^[0-9]{4}-[0-9]{2}-[0-9]{2}$")


@dataclass(frozen=True)
class Predicate:
    attr: str
    op: str
    literal: Any


@dataclass(frozen=True)
class And:
    items: Tuple["CatalogQuery", ...]


@dataclass(frozen=True)
class Or:
    items: Tuple["CatalogQuery", ...]


@dataclass(frozen=True)
class Not:
    item: "CatalogQuery"


CatalogQuery = Union[Predicate, And, Or, Not]


def conforms(column_type: str, value: Any) -> bool:
    if column_type == "INT":
        return isinstance(value, int) and not isinstance(value, bool)
    if column_type == "FLOAT":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if column_type == "DATE":
        return isinstance(value, str) and bool(_DATE_RE.match(value))
    if column_type == "TEXT":
        return isinstance(value, str)
    return False


def predicates(query: CatalogQuery) -> Iterator[Predicate]:
    if isinstance(query, Predicate):
        yield query
    elif isinstance(query, Not):
        yield from predicates(query.item)
    else:
        for item in query.items:
            yield from predicates(item)


def check_types(query: CatalogQuery, columns: Mapping[str, str]):
    """Raise unless every predicate names a known column with a matching literal."""
    for predicate in predicates(query):
        if predicate.op not in OPERATORS:
            raise GridError("TypeMismatch", f"unknown operator {predicate.op!r}")
        column_type = columns.get(predicate.attr)
        if column_type is None:
            raise GridError("UnknownAttribute", f"no column {predicate.attr!r} in schema")
        if predicate.op == "CONTAINS" and column_type != "TEXT":
            raise GridError(
                "TypeMismatch", f"CONTAINS needs a TEXT column, {predicate.attr} is {column_type}"
            )
        if not conforms(column_type, predicate.literal):
            raise GridError(
                "TypeMismatch",
                f"literal {predicate.literal!r} does not fit {column_type} column {predicate.attr}",
            )


def _compare(op: str, value: Any, literal: Any) -> bool:
    try:
        if op == "=":
            return value == literal
        if op == "!=":
            return value != literal
        if op == "<":
            return value < literal
        if op == "<=":
            return value <= literal
        if op == ">":
            return value > literal
        if op == ">=":
            return value >= literal
        if op == "CONTAINS":
            return isinstance(value, str) and str(literal) in value
    except TypeError:
        return False
    raise GridError("TypeMismatch", f"unknown operator {op!r}")


def evaluate(query: CatalogQuery, attrs: Mapping[str, Any]) -> bool:
    """Missing attributes make a predicate false rather than an error."""
    if isinstance(query, Predicate):
        if query.attr not in attrs:
            return False
        return _compare(query.op, attrs[query.attr], query.literal)
    if isinstance(query, And):
        return all(evaluate(item, attrs) for item in query.items)
    if isinstance(query, Or):
        return any(evaluate(item, attrs) for item in query.items)
    if isinstance(query, Not):
        return not evaluate(query.item, attrs)
    raise GridError("TypeMismatch", f"not a catalogue query: {query!r}")


def to_dict(query: CatalogQuery) -> Dict[str, Any]:
    if isinstance(query, Predicate):
        return {"pred": [query.attr, query.op, query.literal]}
    if isinstance(query, And):
        return {"and": [to_dict(item) for item in query.items]}
    if isinstance(query, Or):
        return {"or": [to_dict(item) for item in query.items]}
    return {"not": to_dict(query.item)}


def from_dict(data: Dict[str, Any]) -> CatalogQuery:
    if "pred" in data:
        attr, op, literal = data["pred"]
        return Predicate(attr, op, literal)
    if "and" in data:
        return And(tuple(from_dict(item) for item in data["and"]))
    if "or" in data:
        return Or(tuple(from_dict(item) for item in data["or"]))
    if "not" in data:
        return Not(from_dict(data["not"]))
    raise GridError("TypeMismatch", f"malformed query document: {data!r}")


def render(query: CatalogQuery) -> str:
    if isinstance(query, Predicate):
        literal = f'"{query.literal}"' if isinstance(query.literal, str) else query.literal
        return f"{query.attr} {query.op} {literal}"
    if isinstance(query, Not):
        return f"NOT ({render(query.item)})"
    joiner = " AND " if isinstance(query, And) else " OR "
    return "(" + joiner.join(render(item) for item in query.items) + ")"
