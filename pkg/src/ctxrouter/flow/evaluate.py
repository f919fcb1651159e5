"""Pipeline evaluation, one-shot and incremental.

Records that a stage cannot process (missing field for ``cut``, failed cast in
``shape``, type error in an expression, ...) are removed from the stream and
counted in the :class:`EvalReport` by reason. Evaluation itself never fails.

Incremental evaluation keeps running aggregates. Stages before the first
aggregate stream each batch; the first aggregate folds the batch into its
accumulators; everything after it is recomputed over the current aggregate
table, and only rows that derive from groups touched by the batch are emitted.
One-shot evaluation is incremental evaluation of a single batch from empty
state.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from ctxrouter.flow.ast import (
    AggCall,
    Aggregate,
    BinOp,
    Cut,
    Discard,
    Expr,
    Extract,
    Field,
    HasField,
    HasType,
    Head,
    Literal,
    LogSink,
    Neg,
    Not,
    Pipeline,
    Put,
    Rename,
    Shape,
    Sort,
    Trim,
    Where,
)
from ctxrouter.record import (
    INT64_MAX,
    INT64_MIN,
    CastError,
    RecordError,
    Timestamp,
    TypedRecord,
    cast_value,
    format_value,
    parse_text,
    parse_value_text,
    serialize_text,
    type_of,
)

PLUMBING_FIELDS = ("ts", "event_ts", "from")


@dataclass
class EvalReport:
    scanned: int = 0
    rejected: Counter = field(default_factory=Counter)
    rejects: list = field(default_factory=list)  # (record, reason)
    dropped: int = 0
    logged: list = field(default_factory=list)  # (label, record)

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    def reject(self, rec: TypedRecord, reason: str):
        self.rejected[reason] += 1
        self.rejects.append((rec, reason))


class _Reject(Exception):
    def __init__(self, reason: str):
        self.reason = reason


class _Missing(Exception):
    def __init__(self, name: str):
        self.name = name


class _Null(Exception):
    """Arithmetic with no defined result (division by zero, overflow to inf)."""


# -- expressions --------------------------------------------------------------


def _is_number(v) -> bool:
    t = type(v)
    return t is int or t is float


def _truthy_operand(e: Expr, rec: TypedRecord) -> bool:
    try:
        v = eval_expr(e, rec)
    except (_Missing, _Null):
        return False
    if v is None:
        return False
    if type(v) is not bool:
        raise _Reject(f"logic operand is {type_of(v)}, not bool")
    return v


def _compare(op: str, a, b) -> bool:
    if op in ("==", "!="):
        if a is None or b is None:
            same = a is None and b is None
        elif _is_number(a) and _is_number(b):
            same = a == b
        elif type(a) is type(b):
            same = a == b
        else:
            same = False
        return same if op == "==" else not same
    if a is None or b is None:
        return False
    if not ((_is_number(a) and _is_number(b)) or (type(a) is type(b) and type(a) in (str, Timestamp, bool))):
        raise _Reject(f"cannot compare {type_of(a)} {op} {type_of(b)}")
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _int_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _arith(op: str, a, b):
    if a is None or b is None:
        return None
    if _is_number(a) and _is_number(b):
        if op == "/":
            if b == 0:
                raise _Null()
            if type(a) is int and type(b) is int:
                return _int_div(a, b)
            result = a / b
        elif op == "+":
            result = a + b
        elif op == "-":
            result = a - b
        else:
            result = a * b
        if type(result) is int and not INT64_MIN <= result <= INT64_MAX:
            raise _Reject("int64 overflow")
        if type(result) is float and not math.isfinite(result):
            raise _Null()
        return result
    if op == "+" and type(a) is str and type(b) is str:
        return a + b
    raise _Reject(f"cannot apply {op} to {type_of(a)} and {type_of(b)}")


def eval_expr(e: Expr, rec: TypedRecord) -> Any:
    t = type(e)
    if t is Field:
        if e.name not in rec:
            raise _Missing(e.name)
        return rec[e.name]
    if t is Literal:
        return e.value
    if t is BinOp:
        op = e.op
        if op == "and":
            return _truthy_operand(e.left, rec) and _truthy_operand(e.right, rec)
        if op == "or":
            return _truthy_operand(e.left, rec) or _truthy_operand(e.right, rec)
        a = eval_expr(e.left, rec)
        b = eval_expr(e.right, rec)
        if op in ("+", "-", "*", "/"):
            return _arith(op, a, b)
        return _compare(op, a, b)
    if t is HasField:
        return e.field in rec
    if t is HasType:
        if e.field not in rec:
            return False
        v = rec[e.field]
        return v is None or type_of(v) == e.type
    if t is Not:
        v = eval_expr(e.operand, rec)
        if v is None:
            return None
        if type(v) is not bool:
            raise _Reject(f"cannot negate {type_of(v)}")
        return not v
    if t is Neg:
        v = eval_expr(e.operand, rec)
        if v is None:
            return None
        if not _is_number(v):
            raise _Reject(f"cannot negate {type_of(v)}")
        if v == INT64_MIN and type(v) is int:
            raise _Reject("int64 overflow")
        return -v
    raise TypeError(f"unknown expression node {e!r}")


# -- per-record stages -------------------------------------------------------------


def _apply_record(stage, rec: TypedRecord, report: Optional[EvalReport]) -> Optional[TypedRecord]:
    """Apply a per-record stage. Returns None to filter; raises _Reject."""
    t = type(stage)
    if t is Where:
        try:
            v = eval_expr(stage.expr, rec)
        except (_Missing, _Null):
            return None
        if v is None or v is False:
            return None
        if v is not True:
            raise _Reject(f"where: condition is {type_of(v)}, not bool")
        return rec
    if t is Cut:
        for f in stage.fields:
            if f not in rec:
                raise _Reject(f"cut: missing field {f}")
        return rec.select(stage.fields)
    if t is Rename:
        for new, old in stage.pairs:
            if old not in rec or new == old:
                continue
            if new in rec:
                raise _Reject(f"rename: field {new} already exists")
            rec = rec.renamed(old, new)
        return rec
    if t is Put:
        try:
            value = eval_expr(stage.expr, rec)
        except _Missing as exc:
            raise _Reject(f"put: missing field {exc.name}") from None
        except _Null:
            value = None
        return rec.with_field(stage.field, value)
    if t is Shape:
        for f, target in stage.fields:
            if f in rec:
                try:
                    rec = rec.with_field(f, cast_value(rec[f], target))
                except CastError as exc:
                    raise _Reject(f"shape: {f}: {exc}") from None
        return rec
    if t is Extract:
        keep = [f for f in stage.fields if f in rec]
        keep += [f for f in PLUMBING_FIELDS if f in rec and f not in stage.fields]
        return rec.select(keep)
    if t is Trim:
        return rec.without(stage.fields)
    if t is Discard:
        if stage.reject:
            raise _Reject(stage.reason)
        if report is not None:
            report.dropped += 1
        return None
    if t is LogSink:
        if report is not None:
            report.logged.append((stage.label, rec))
        return rec
    raise TypeError(f"not a per-record stage: {stage!r}")


def _sort_key(v):
    if _is_number(v):
        return (0, v)
    if type(v) is str:
        return (1, v)
    if type(v) is Timestamp:
        return (2, v.ns)
    if type(v) is bool:
        return (3, v)
    return (4, format_value(v))


def _apply_list(stage, rows: list, report: Optional[EvalReport]) -> list:
    """rows are (record, emit) pairs; side effects are reported only for emitted rows."""
    t = type(stage)
    if t is Head:
        return rows[: stage.n]
    if t is Sort:
        keyed = []
        missing = []
        for row in rows:
            v = row[0].get(stage.field)
            (missing if v is None else keyed).append(row)
        keyed.sort(key=lambda row: _sort_key(row[0][stage.field]), reverse=stage.descending)
        return keyed + missing
    if t is Aggregate:
        table = _AggTable(stage)
        touched = set()
        for rec, emit in rows:
            key = table.add(rec, report if emit else None)
            if key is not None and emit:
                touched.add(key)
        return [(rec, key in touched) for key, rec in table.rows()]
    out = []
    for rec, emit in rows:
        try:
            result = _apply_record(stage, rec, report if emit else None)
        except _Reject as exc:
            if emit and report is not None:
                report.reject(rec, exc.reason)
            continue
        except RecordError as exc:
            if emit and report is not None:
                report.reject(rec, f"{type(stage).__name__.lower()}: {exc}")
            continue
        if result is not None:
            out.append((result, emit))
    return out


# -- aggregation -------------------------------------------------------------


class _Acc:
    __slots__ = ("fn", "count", "nonnull", "value", "saw_float")

    def __init__(self, fn: str):
        self.fn = fn
        self.count = 0
        self.nonnull = 0
        self.value = None
        self.saw_float = False

    def check(self, v) -> Optional[str]:
        """Return a rejection reason if v cannot be folded in."""
        if v is None or self.fn == "count":
            return None
        if self.fn in ("avg", "sum"):
            if not _is_number(v):
                return f"{self.fn}: non-numeric value of type {type_of(v)}"
            return None
        if self.value is None:
            if type(v) in (int, float, str, Timestamp, bool):
                return None
            return f"{self.fn}: unordered value of type {type_of(v)}"
        if _is_number(v) and _is_number(self.value):
            return None
        if type(v) is not type(self.value):
            return f"{self.fn}: mixed types {type_of(self.value)} and {type_of(v)}"
        return None

    def add(self, v):
        self.count += 1
        if v is None or self.fn == "count":
            return
        self.nonnull += 1
        if type(v) is float:
            self.saw_float = True
        if self.value is None:
            self.value = v
        elif self.fn in ("avg", "sum"):
            self.value = self.value + v
            if type(self.value) is int and not INT64_MIN <= self.value <= INT64_MAX:
                self.value = float(self.value)
        elif self.fn == "min":
            if v < self.value:
                self.value = v
        elif v > self.value:
            self.value = v

    def result(self):
        if self.fn == "count":
            return self.count
        if self.nonnull == 0:
            return None
        if self.fn == "avg":
            return self.value / self.nonnull
        if self.saw_float and type(self.value) is int:
            return float(self.value)
        return self.value

    def dump(self) -> dict:
        return {
            "count": self.count,
            "nonnull": self.nonnull,
            "value": None if self.value is None else format_value(self.value),
            "float": self.saw_float,
        }

    @classmethod
    def load(cls, fn: str, data: dict) -> "_Acc":
        acc = cls(fn)
        acc.count = data["count"]
        acc.nonnull = data["nonnull"]
        acc.value = None if data["value"] is None else parse_value_text(data["value"])
        acc.saw_float = data["float"]
        return acc


def _group_key(values: tuple) -> tuple:
    # tag by type so 1, 1. and true stay distinct groups
    return tuple((type(v).__name__, v) for v in values)


class _AggTable:
    def __init__(self, stage: Aggregate):
        self.stage = stage
        self.groups: dict[tuple, tuple[tuple, list[_Acc]]] = {}

    def add(self, rec: TypedRecord, report: Optional[EvalReport]) -> Optional[tuple]:
        values = []
        for f in self.stage.by:
            if f not in rec:
                if report is not None:
                    report.reject(rec, f"aggregate: missing group-by field {f}")
                return None
            values.append(rec[f])
        values = tuple(values)
        key = _group_key(values)
        entry = self.groups.get(key)
        if entry is None:
            accs = [_Acc(c.fn) for c in self.stage.calls]
        else:
            accs = entry[1]
        inputs = []
        for call, acc in zip(self.stage.calls, accs):
            v = rec.get(call.field) if call.field else None
            reason = acc.check(v)
            if reason is not None:
                if report is not None:
                    report.reject(rec, reason)
                v = None
            inputs.append(v)
        for acc, v in zip(accs, inputs):
            acc.add(v)
        if entry is None:
            self.groups[key] = (values, accs)
        return key

    def output(self, values: tuple, accs: list[_Acc]) -> TypedRecord:
        pairs = list(zip(self.stage.by, values))
        pairs += [(c.output, acc.result()) for c, acc in zip(self.stage.calls, accs)]
        return TypedRecord(pairs)

    def rows(self):
        for key, (values, accs) in self.groups.items():
            yield key, self.output(values, accs)

    def dump(self) -> list:
        out = []
        for values, accs in self.groups.values():
            key_rec = TypedRecord(list(zip(self.stage.by, values)))
            out.append([serialize_text(key_rec), [a.dump() for a in accs]])
        return out

    @classmethod
    def load(cls, stage: Aggregate, data: list) -> "_AggTable":
        table = cls(stage)
        for key_text, acc_data in data:
            values = parse_text(key_text).values
            accs = [_Acc.load(c.fn, d) for c, d in zip(stage.calls, acc_data)]
            table.groups[_group_key(values)] = (values, accs)
        return table


# -- drivers ------------------------------------------------------------------


def _run(stages: Iterable, rows: list, report: Optional[EvalReport]) -> list:
    for stage in stages:
        rows = _apply_list(stage, rows, report)
    return rows


def eval_batch_incremental(
    pipeline: Pipeline,
    batch: Iterable[TypedRecord],
    state: Optional[dict] = None,
    report: Optional[EvalReport] = None,
) -> tuple[list[TypedRecord], Optional[dict]]:
    """Evaluate one batch; returns (output records, new state).

    ``state`` is a JSON-serializable dict (or None before the first batch). It
    is never mutated; a fresh dict is returned. Pipelines without aggregates
    are stateless and always return None.
    """
    batch = list(batch)
    if report is not None:
        report.scanned += len(batch)
    rows = [(r, True) for r in batch]
    stages = pipeline.stages
    first = next((i for i, s in enumerate(stages) if isinstance(s, Aggregate)), None)
    if first is None:
        return [r for r, _ in _run(stages, rows, report)], None

    agg: Aggregate = stages[first]
    if state is not None and state.get("pipeline") != str(pipeline):
        raise ValueError("incremental state belongs to a different pipeline")
    table = _AggTable.load(agg, state["groups"]) if state else _AggTable(agg)
    touched = set()
    for rec, _ in _run(stages[:first], rows, report):
        key = table.add(rec, report)
        if key is not None:
            touched.add(key)
    table_rows = [(rec, key in touched) for key, rec in table.rows()]
    out = _run(stages[first + 1:], table_rows, report)
    new_state = {"pipeline": str(pipeline), "groups": table.dump()}
    return [r for r, emit in out if emit], new_state


def eval_pipeline(
    pipeline: Pipeline, records: Iterable[TypedRecord], report: Optional[EvalReport] = None
) -> list[TypedRecord]:
    out, _ = eval_batch_incremental(pipeline, records, None, report)
    return out


def qcx(targets: Iterable[str], pipeline: Pipeline) -> int:
    """Query complexity: operators (one per aggregate function) plus two per target."""
    ops = sum(len(s.calls) if isinstance(s, Aggregate) else 1 for s in pipeline.stages)
    return ops + 2 * len(list(targets))
