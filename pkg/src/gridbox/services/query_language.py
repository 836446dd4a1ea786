"""Clinical query language: tokenizer, parser and translation to catalogue queries.

Grammar::

    query      := expr
    expr       := term {("AND" | "OR") term}
    term       := ["NOT"] (comparison | "(" expr ")")
    comparison := attr op literal

AND and OR share one precedence level and fold left to right.
"""

import re
from dataclasses import dataclass
from datetime import date
from typing import List, Union

from gridbox.errors import GridError
from gridbox.services.catalog_query import And, CatalogQuery, Not, Or, Predicate

ATTRIBUTE_TYPES = {
    "patient_age": "INT",
    "laterality": "TEXT",
    "view": "TEXT",
    "study_date": "DATE",
    "site": "TEXT",
    "modality": "TEXT",
}
COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")
KEYWORDS = ("AND", "OR", "NOT")

_AGE_REWRITE = {">=": "<=", ">": "<", "<=": ">=", "<": ">", "=": "=", "!=": "!="}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<date>[0-9]{4}-[0-9]{2}-[0-9]{2}(?![0-9A-Za-z_]))
  | (?P<int>-?[0-9]+(?![0-9A-Za-z_.-]))
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<op><=|>=|!=|=|<|>)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    value: str
    pos: int


def syntax_error(message: str, pos: int) -> GridError:
    error = GridError("SyntaxError", f"{message} at position {pos}")
    error.position = pos  # type: ignore[attr-defined]
    return error


def tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise syntax_error(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup or ""
        value = match.group()
        if kind == "string":
            value = re.sub(r"\\(.)", r"\1", value[1:-1])
        elif kind == "ident" and value.upper() in KEYWORDS and value.isupper():
            kind = "keyword"
        if kind != "ws":
            tokens.append(Token(kind, value, pos))
        pos = match.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


@dataclass(frozen=True)
class Comparison:
    attr: str
    op: str
    literal: Union[int, str]


@dataclass(frozen=True)
class BoolOp:
    op: str
    left: "QueryAST"
    right: "QueryAST"


@dataclass(frozen=True)
class Negation:
    item: "QueryAST"


QueryAST = Union[Comparison, BoolOp, Negation]


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.index = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def parse(self) -> QueryAST:
        node = self.expr()
        if self.current.kind != "eof":
            raise syntax_error(f"unexpected {self.current.value!r}", self.current.pos)
        return node

    def expr(self) -> QueryAST:
        node = self.term()
        while self.current.kind == "keyword" and self.current.value in ("AND", "OR"):
            op = self.advance().value
            node = BoolOp(op, node, self.term())
        return node

    def term(self) -> QueryAST:
        if self.current.kind == "keyword" and self.current.value == "NOT":
            self.advance()
            return Negation(self.primary())
        return self.primary()

    def primary(self) -> QueryAST:
        token = self.current
        if token.kind == "lparen":
            self.advance()
            node = self.expr()
            if self.current.kind != "rparen":
                raise syntax_error("expected ')'", self.current.pos)
            self.advance()
            return node
        if token.kind == "ident":
            return self.comparison()
        if token.kind == "eof":
            raise syntax_error("unexpected end of input", token.pos)
        raise syntax_error(f"expected attribute, got {token.value!r}", token.pos)

    def comparison(self) -> Comparison:
        attr_token = self.advance()
        attr = attr_token.value
        if attr not in ATTRIBUTE_TYPES:
            raise GridError(
                "UnknownAttribute",
                f"{attr!r} is not a clinical attribute (position {attr_token.pos})",
            )
        op_token = self.current
        if op_token.kind != "op":
            raise syntax_error("expected comparison operator", op_token.pos)
        self.advance()
        literal_token = self.current
        if literal_token.kind not in ("int", "string", "date"):
            raise syntax_error("expected literal", literal_token.pos)
        self.advance()
        return Comparison(attr, op_token.value, _typed_literal(attr, literal_token))


def _typed_literal(attr: str, token: Token) -> Union[int, str]:
    expected = ATTRIBUTE_TYPES[attr]
    if expected == "INT":
        if token.kind != "int":
            raise GridError("TypeError", f"{attr} needs an integer, got {token.value!r}")
        return int(token.value)
    if expected == "DATE":
        if token.kind not in ("date", "string"):
            raise GridError("TypeError", f"{attr} needs a YYYY-MM-DD date, got {token.value!r}")
        try:
            return date.fromisoformat(token.value).isoformat()
        except ValueError as exc:
            raise GridError("TypeError", f"{token.value!r} is not an ISO-8601 date") from exc
    if token.kind != "string":
        raise GridError("TypeError", f"{attr} needs a quoted string, got {token.value!r}")
    return token.value


def parse_query(text: str) -> QueryAST:
    return _Parser(text).parse()


def translate(ast: QueryAST, query_year: int) -> CatalogQuery:
    """Map a clinical AST onto catalogue attributes.

    ``patient_age`` becomes a range on ``birth_year`` using
    ``age = query_year - birth_year``.
    """
    if isinstance(ast, Comparison):
        if ast.attr == "patient_age":
            return Predicate("birth_year", _AGE_REWRITE[ast.op], query_year - int(ast.literal))
        return Predicate(ast.attr, ast.op, ast.literal)
    if isinstance(ast, Negation):
        return Not(translate(ast.item, query_year))
    left = translate(ast.left, query_year)
    right = translate(ast.right, query_year)
    if ast.op == "AND":
        return And((left, right))
    return Or((left, right))


def render(ast: QueryAST) -> str:
    if isinstance(ast, Comparison):
        literal = ast.literal if isinstance(ast.literal, int) else f'"{ast.literal}"'
        return f"{ast.attr} {ast.op} {literal}"
    if isinstance(ast, Negation):
        return f"NOT ({render(ast.item)})"
    return f"({render(ast.left)} {ast.op} {render(ast.right)})"
