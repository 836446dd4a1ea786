"""Job description language: ``key = value;`` statements and requirement expressions.

Example::

    Executable   = "checksum";
    InputData    = {"/mg/oxford/img-001.mgd"};
    OutputLFN    = "/mg/oxford/results/img-001.sha256";
    Requirements = packages CONTAINS "checksum" AND queue_length < 4;
"""

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from gridbox.errors import GridError
from gridbox.models import ResourceAd
from gridbox.services.query_language import (
    BoolOp,
    Comparison,
    Negation,
    QueryAST,
    Token,
    tokenize,
)

AD_ATTRIBUTE_TYPES = {
    "ce_id": "TEXT",
    "site": "TEXT",
    "vo": "TEXT",
    "local_se": "TEXT",
    "max_running": "INT",
    "queue_length": "INT",
    "packages": "SET",
}
REQUIREMENT_OPS = ("=", "!=", "<", "<=", ">", ">=", "CONTAINS")

_KEYS = {
    "executable": "executable",
    "arguments": "arguments",
    "inputdata": "input_data",
    "outputlfn": "output_lfn",
    "outputdata": "output_lfn",
    "requirements": "requirements",
}


@dataclass
class JobDescriptor:
    jdl_text: str
    executable: str
    arguments: str = ""
    input_data: List[str] = field(default_factory=list)
    output_lfn: str = ""
    requirements_text: str = ""
    requirements: Optional[QueryAST] = None

    def matches(self, ad: ResourceAd) -> bool:
        if self.requirements is None:
            return True
        return evaluate_requirements(self.requirements, ad)


def _malformed(message: str) -> GridError:
    return GridError("MalformedJDL", message)


def _statements(text: str) -> List[str]:
    statements: List[str] = []
    current: List[str] = []
    in_string = False
    escaped = False
    depth = 0
    for char in text:
        if in_string:
            current.append(char)
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth < 0:
                raise _malformed("unbalanced '}'")
        elif char == ";" and depth == 0:
            statements.append("".join(current))
            current = []
            continue
        current.append(char)
    if in_string:
        raise _malformed("unterminated string")
    if depth:
        raise _malformed("unbalanced '{'")
    if "".join(current).strip():
        raise _malformed("last statement is missing its ';'")
    return [item for item in statements if item.strip()]


def _string_value(raw: str, key: str) -> str:
    raw = raw.strip()
    if len(raw) < 2 or raw[0] != '"' or raw[-1] != '"':
        raise _malformed(f"{key} must be a quoted string")
    try:
        value = json.loads(raw)
    except ValueError as exc:
        raise _malformed(f"{key} is not a valid string") from exc
    return value


def _list_value(raw: str, key: str) -> List[str]:
    raw = raw.strip()
    if not raw.startswith("{") or not raw.endswith("}"):
        raise _malformed(f"{key} must be a {{...}} list")
    inner = raw[1:-1].strip()
    if not inner:
        return []
    try:
        values = json.loads(f"[{inner}]")
    except ValueError as exc:
        raise _malformed(f"{key} must list quoted strings") from exc
    if not all(isinstance(item, str) for item in values):
        raise _malformed(f"{key} must list quoted strings")
    return values


def parse_jdl(text: str) -> JobDescriptor:
    lines = [line for line in text.splitlines() if not line.lstrip().startswith("#")]
    values: Dict[str, Any] = {}
    for statement in _statements("\n".join(lines)):
        name, eq, raw = statement.partition("=")
        key = _KEYS.get(name.strip().lower())
        if not eq or key is None:
            raise _malformed(f"unknown statement {statement.strip()!r}")
        if key in values:
            raise _malformed(f"{name.strip()} is given twice")
        if key == "input_data":
            values[key] = _list_value(raw, name.strip())
        elif key == "requirements":
            values["requirements_text"] = raw.strip()
            values[key] = parse_requirements(raw)
        else:
            values[key] = _string_value(raw, name.strip())
    if not values.get("executable"):
        raise _malformed("Executable is required")
    return JobDescriptor(jdl_text=text, **values)


def render_jdl(
    executable: str,
    input_data: List[str],
    output_lfn: str,
    requirements: str = "",
    arguments: str = "",
) -> str:
    lines = [f"Executable = {json.dumps(executable)};"]
    if arguments:
        lines.append(f"Arguments = {json.dumps(arguments)};")
    lines.append(f"InputData = {{{', '.join(json.dumps(lfn) for lfn in input_data)}}};")
    if output_lfn:
        lines.append(f"OutputLFN = {json.dumps(output_lfn)};")
    if requirements:
        lines.append(f"Requirements = {requirements};")
    return "\n".join(lines) + "\n"


# requirements


def _requirements_error(message: str, pos: int) -> GridError:
    return GridError("MalformedRequirements", f"{message} at position {pos}")


class _RequirementParser:
    def __init__(self, text: str):
        try:
            self.tokens = tokenize(text)
        except GridError as exc:
            raise GridError("MalformedRequirements", exc.message) from exc
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
            raise _requirements_error(f"unexpected {self.current.value!r}", self.current.pos)
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
        if self.current.kind == "lparen":
            self.advance()
            node = self.expr()
            if self.current.kind != "rparen":
                raise _requirements_error("expected ')'", self.current.pos)
            self.advance()
            return node
        return self.comparison()

    def comparison(self) -> Comparison:
        attr = self.advance()
        if attr.kind != "ident":
            raise _requirements_error("expected an attribute", attr.pos)
        attr_type = AD_ATTRIBUTE_TYPES.get(attr.value)
        if attr_type is None:
            raise _requirements_error(f"unknown attribute {attr.value!r}", attr.pos)
        op_token = self.advance()
        if op_token.kind == "op":
            op = op_token.value
        elif op_token.kind == "ident" and op_token.value == "CONTAINS":
            op = "CONTAINS"
        else:
            raise _requirements_error("expected an operator", op_token.pos)
        literal = self.advance()
        value = _typed_literal(attr.value, attr_type, op, literal)
        return Comparison(attr.value, op, value)


def _typed_literal(attr: str, attr_type: str, op: str, token: Token):
    if token.kind not in ("string", "int"):
        raise _requirements_error("expected a literal", token.pos)
    value = int(token.value) if token.kind == "int" else token.value
    if op == "CONTAINS":
        if attr_type not in ("SET", "TEXT") or token.kind != "string":
            raise _requirements_error(f"{attr} CONTAINS needs a text literal", token.pos)
        return value
    if attr_type == "SET":
        raise _requirements_error(f"{attr} only supports CONTAINS", token.pos)
    if attr_type == "INT" and token.kind != "int":
        raise _requirements_error(f"{attr} compares with integers", token.pos)
    if attr_type == "TEXT" and (token.kind != "string" or op not in ("=", "!=")):
        raise _requirements_error(f"{attr} supports = and != with text", token.pos)
    return value


def parse_requirements(text: str) -> Optional[QueryAST]:
    if not text.strip():
        return None
    return _RequirementParser(text).parse()


def evaluate_requirements(expr: QueryAST, ad: ResourceAd) -> bool:
    if isinstance(expr, BoolOp):
        left = evaluate_requirements(expr.left, ad)
        if expr.op == "AND":
            return left and evaluate_requirements(expr.right, ad)
        return left or evaluate_requirements(expr.right, ad)
    if isinstance(expr, Negation):
        return not evaluate_requirements(expr.item, ad)
    value = ad.as_attrs()[expr.attr]
    op, literal = expr.op, expr.literal
    if op == "CONTAINS":
        return literal in value
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
    return value >= literal
