"""Syntax tree for dataflow pipelines.

Every node renders back to source text through ``str()``; binary expressions
are always parenthesized so that parsing the rendered text gives an equal tree.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional, Union

from ctxrouter.record import Value, format_value

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
KEYWORDS = frozenset({"and", "or", "by", "true", "false", "null", "has", "this"})


def render_name(name: str) -> str:
    if _IDENT.fullmatch(name) and name not in KEYWORDS:
        return name
    return json.dumps(name, ensure_ascii=False)


# -- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    name: str

    def __str__(self) -> str:
        if _IDENT.fullmatch(self.name) and self.name not in KEYWORDS:
            return self.name
        return f"`{self.name}`"


@dataclass(frozen=True)
class Literal:
    value: Value

    def __eq__(self, other):
        # 1 and 1. (and True) are distinct literals
        return isinstance(other, Literal) and type(self.value) is type(other.value) and self.value == other.value

    def __hash__(self):
        return hash((type(self.value), self.value))

    def __str__(self) -> str:
        return format_value(self.value)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        return f"({self.left}{_render_op(self.op)}{self.right})"


@dataclass(frozen=True)
class Not:
    operand: "Expr"

    def __str__(self) -> str:
        return f"(!{self.operand})"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"

    def __str__(self) -> str:
        return f"-{self.operand}"


@dataclass(frozen=True)
class HasField:
    field: str

    def __str__(self) -> str:
        return f"has({render_name(self.field)})"


@dataclass(frozen=True)
class HasType:
    field: str
    type: str

    def __str__(self) -> str:
        return f"has({render_name(self.field)},{self.type})"


Expr = Union[Field, Literal, BinOp, Not, Neg, HasField, HasType]

ARITH_OPS = ("+", "-", "*", "/")
COMPARE_OPS = ("==", "!=", "<", "<=", ">", ">=")
LOGIC_OPS = ("and", "or")


def _render_op(op: str) -> str:
    return f" {op} " if op in LOGIC_OPS else op


# -- stages ------------------------------------------------------------------


@dataclass(frozen=True)
class Where:
    expr: Expr

    def __str__(self) -> str:
        return f"where {self.expr}"


@dataclass(frozen=True)
class Head:
    n: int = 1

    def __str__(self) -> str:
        return "head" if self.n == 1 else f"head {self.n}"


@dataclass(frozen=True)
class Sort:
    field: str
    descending: bool = False

    def __str__(self) -> str:
        return f"sort {'-r ' if self.descending else ''}{render_name(self.field)}"


@dataclass(frozen=True)
class Cut:
    fields: tuple[str, ...]

    def __str__(self) -> str:
        return "cut " + ",".join(map(render_name, self.fields))


@dataclass(frozen=True)
class Rename:
    pairs: tuple[tuple[str, str], ...]  # (new, old)

    def __str__(self) -> str:
        return "rename " + ",".join(f"{render_name(n)}:={render_name(o)}" for n, o in self.pairs)


@dataclass(frozen=True)
class Put:
    field: str
    expr: Expr

    def __str__(self) -> str:
        return f"put {render_name(self.field)}:={self.expr}"


@dataclass(frozen=True)
class Shape:
    fields: tuple[tuple[str, str], ...]

    def __str__(self) -> str:
        inner = ",".join(f"{render_name(f)}:{t}" for f, t in self.fields)
        return f"shape(this,<{{{inner}}}>)"


AGG_FUNCS = ("avg", "sum", "count", "min", "max")


@dataclass(frozen=True)
class AggCall:
    output: str
    fn: str
    field: Optional[str]  # None for count()

    def __str__(self) -> str:
        call = f"{self.fn}({render_name(self.field) if self.field else ''})"
        return call if self.output == self.fn else f"{render_name(self.output)}:={call}"


@dataclass(frozen=True)
class Aggregate:
    calls: tuple[AggCall, ...]
    by: tuple[str, ...] = ()

    def __str__(self) -> str:
        text = ",".join(map(str, self.calls))
        if self.by:
            text += " by " + ",".join(map(render_name, self.by))
        return text


@dataclass(frozen=True)
class LogSink:
    label: str

    def __str__(self) -> str:
        return f"log({json.dumps(self.label, ensure_ascii=False)})"


# Stages produced by rule compilation. They parse back, but are not meant for
# hand-written pipelines.


@dataclass(frozen=True)
class Extract:
    """Keep the listed fields plus the plumbing fields ts, event_ts, from."""

    fields: tuple[str, ...]

    def __str__(self) -> str:
        return "extract " + ",".join(map(render_name, self.fields))


@dataclass(frozen=True)
class Trim:
    """Remove the listed fields when present."""

    fields: tuple[str, ...]

    def __str__(self) -> str:
        return "trim " + ",".join(map(render_name, self.fields))


@dataclass(frozen=True)
class Discard:
    """Drop every record. ``reject`` routes them to the errors branch."""

    reason: str
    reject: bool = True

    def __str__(self) -> str:
        word = "reject" if self.reject else "drop"
        return f"{word}({json.dumps(self.reason, ensure_ascii=False)})"


Stage = Union[Where, Head, Sort, Cut, Rename, Put, Shape, Aggregate, LogSink, Extract, Trim, Discard]


@dataclass(frozen=True)
class Pipeline:
    stages: tuple = ()

    def __str__(self) -> str:
        return " | ".join(map(str, self.stages))

    def __len__(self) -> int:
        return len(self.stages)

    def __add__(self, other: "Pipeline") -> "Pipeline":
        return Pipeline(self.stages + other.stages)

    @property
    def is_identity(self) -> bool:
        return not self.stages

    @property
    def has_aggregate(self) -> bool:
        return any(isinstance(s, Aggregate) for s in self.stages)

    @property
    def order_sensitive(self) -> bool:
        return any(isinstance(s, (Head, Sort)) for s in self.stages)
