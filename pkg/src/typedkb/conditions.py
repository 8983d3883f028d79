"""Condition expressions used by predicates, rules, monitors and goal schemas.

Grammar::

    expr    := all(expr, ...) | any(expr, ...) | not(expr)
             | true | false
             | pred                       # name or name(lit, ...)
             | path CMP rhs               # path has at least one dot
    CMP     := = | != | ≠ | < | <= | ≤ | > | >= | ≥ | in | contains
    rhs     := literal | $param | @path
    literal := number | word | "quoted" | [literal, ...]

Combinators nest at most ``MAX_DEPTH`` levels.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Union

MAX_DEPTH = 8

COMPARATORS = ("=", "!=", "<", "<=", ">", ">=", "in", "contains")
_CMP_ALIASES = {"≠": "!=", "≤": "<=", "≥": ">="}
NUMERIC_COMPARATORS = ("<", "<=", ">", ">=")


class ConditionSyntaxError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at column {pos + 1} in {text!r}")
        self.pos = pos
        self.text = text


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class PredRef:
    name: str
    args: tuple = ()


@dataclass(frozen=True)
class Literal:
    value: Any


@dataclass(frozen=True)
class ParamRef:
    name: str


@dataclass(frozen=True)
class FieldRef:
    path: str


@dataclass(frozen=True)
class Compare:
    path: str
    op: str
    rhs: Union[Literal, ParamRef, FieldRef]


@dataclass(frozen=True)
class All:
    items: tuple


@dataclass(frozen=True)
class Any_:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: "Expr"


Expr = Union[Const, PredRef, Compare, All, Any_, Not]

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>-?\d+(?:\.\d+)?)
  | (?P<str>"[^"]*")
  | (?P<param>\$[A-Za-z_][A-Za-z0-9_]*)
  | (?P<field>@[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)+)
  | (?P<word>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<cmp>!=|<=|>=|≠|≤|≥|=|<|>)
  | (?P<punct>[(),\[\]])
    """,
    re.VERBOSE,
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ConditionSyntaxError("unexpected character", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        tok = self.toks[self.i]
        if (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = value or kind
            raise ConditionSyntaxError(f"expected {want!r}, got {tok[1] or 'end'!r}", self.text, tok[2])
        self.i += 1
        return tok

    def expr(self, depth: int) -> Expr:
        kind, val, pos = self.peek()
        if kind != "word":
            raise ConditionSyntaxError(f"unexpected {val or 'end'!r}", self.text, pos)
        nxt = self.toks[self.i + 1]
        if val in ("all", "any", "not") and nxt[1] == "(":
            if depth >= MAX_DEPTH:
                raise ConditionSyntaxError(f"nesting deeper than {MAX_DEPTH}", self.text, pos)
            self.take()
            self.take("punct", "(")
            items = [self.expr(depth + 1)]
            while self.peek()[1] == ",":
                self.take()
                items.append(self.expr(depth + 1))
            self.take("punct", ")")
            if val == "not":
                if len(items) != 1:
                    raise ConditionSyntaxError("not() takes exactly one argument", self.text, pos)
                return Not(items[0])
            return All(tuple(items)) if val == "all" else Any_(tuple(items))
        if val in ("true", "false") and nxt[1] != "(" and "." not in val:
            self.take()
            return Const(val == "true")
        self.take()
        if "." in val:
            op_tok = self.peek()
            if op_tok[0] == "cmp" or op_tok[1] in ("in", "contains"):
                self.take()
                op = _CMP_ALIASES.get(op_tok[1], op_tok[1])
                return Compare(val, op, self.rhs())
            raise ConditionSyntaxError("field path needs a comparator", self.text, op_tok[2])
        args: list = []
        if self.peek()[1] == "(":
            self.take()
            args.append(self.literal())
            while self.peek()[1] == ",":
                self.take()
                args.append(self.literal())
            self.take("punct", ")")
        return PredRef(val, tuple(args))

    def rhs(self):
        kind, val, _ = self.peek()
        if kind == "param":
            self.take()
            return ParamRef(val[1:])
        if kind == "field":
            self.take()
            return FieldRef(val[1:])
        return Literal(self.literal())

    def literal(self):
        kind, val, pos = self.peek()
        if kind == "num":
            self.take()
            return float(val) if "." in val else int(val)
        if kind == "str":
            self.take()
            return val[1:-1]
        if kind == "word" and "." not in val:
            self.take()
            return {"true": True, "false": False, "none": None}.get(val, val)
        if val == "[":
            self.take()
            items = []
            if self.peek()[1] != "]":
                items.append(self.literal())
                while self.peek()[1] == ",":
                    self.take()
                    items.append(self.literal())
            self.take("punct", "]")
            return tuple(items)
        raise ConditionSyntaxError(f"expected literal, got {val or 'end'!r}", self.text, pos)


def parse_condition(text: str) -> Expr:
    if not isinstance(text, str) or not text.strip():
        raise ConditionSyntaxError("empty condition", str(text), 0)
    p = _Parser(text)
    expr = p.expr(0)
    kind, val, pos = p.peek()
    if kind != "end":
        raise ConditionSyntaxError(f"trailing input {val!r}", text, pos)
    return expr


_WORD = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _fmt_literal(v) -> str:
    if v is None:
        return "none"
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, tuple):
        return "[" + ", ".join(_fmt_literal(x) for x in v) + "]"
    if isinstance(v, (int, float)):
        return repr(v)
    if _WORD.match(v) and v not in ("true", "false", "none", "all", "any", "not", "in", "contains"):
        return v
    return f'"{v}"'


def format_condition(expr: Expr) -> str:
    """Canonical text form; ``parse_condition(format_condition(e)) == e``."""
    if isinstance(expr, Const):
        return "true" if expr.value else "false"
    if isinstance(expr, PredRef):
        if not expr.args:
            return expr.name
        return f"{expr.name}({', '.join(_fmt_literal(a) for a in expr.args)})"
    if isinstance(expr, Compare):
        rhs = expr.rhs
        if isinstance(rhs, ParamRef):
            r = "$" + rhs.name
        elif isinstance(rhs, FieldRef):
            r = "@" + rhs.path
        else:
            r = _fmt_literal(rhs.value)
        return f"{expr.path} {expr.op} {r}"
    if isinstance(expr, Not):
        return f"not({format_condition(expr.item)})"
    name = "all" if isinstance(expr, All) else "any"
    return f"{name}({', '.join(format_condition(i) for i in expr.items)})"


def walk(expr: Expr) -> Iterator[Expr]:
    yield expr
    if isinstance(expr, (All, Any_)):
        for item in expr.items:
            yield from walk(item)
    elif isinstance(expr, Not):
        yield from walk(expr.item)


def predicate_refs(expr: Expr) -> list[PredRef]:
    return [e for e in walk(expr) if isinstance(e, PredRef)]


def comparisons(expr: Expr) -> list[Compare]:
    return [e for e in walk(expr) if isinstance(e, Compare)]


def depth(expr: Expr) -> int:
    if isinstance(expr, (All, Any_)):
        return 1 + max(depth(i) for i in expr.items)
    if isinstance(expr, Not):
        return 1 + depth(expr.item)
    return 0


def compare(lhs, op: str, rhs) -> bool:
    if op == "=":
        return lhs == rhs
    if op == "!=":
        return lhs != rhs
    if op == "in":
        return rhs is not None and lhs in rhs
    if op == "contains":
        return lhs is not None and rhs in lhs
    if lhs is None or rhs is None or isinstance(lhs, bool) or isinstance(rhs, bool):
        return False
    if op == "<":
        return lhs < rhs
    if op == "<=":
        return lhs <= rhs
    if op == ">":
        return lhs > rhs
    return lhs >= rhs


def evaluate(
    expr: Expr,
    *,
    predicate: Callable[[PredRef], bool],
    field: Callable[[str], Any],
    params: dict | None = None,
) -> bool:
    """Short-circuit evaluation; ``predicate`` and ``field`` are lookups supplied by the caller."""
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, PredRef):
        return bool(predicate(expr))
    if isinstance(expr, Compare):
        rhs = expr.rhs
        if isinstance(rhs, ParamRef):
            value = (params or {})[rhs.name]
        elif isinstance(rhs, FieldRef):
            value = field(rhs.path)
        else:
            value = rhs.value
        return compare(field(expr.path), expr.op, value)
    if isinstance(expr, Not):
        return not evaluate(expr.item, predicate=predicate, field=field, params=params)
    if isinstance(expr, All):
        return all(evaluate(i, predicate=predicate, field=field, params=params) for i in expr.items)
    return any(evaluate(i, predicate=predicate, field=field, params=params) for i in expr.items)
