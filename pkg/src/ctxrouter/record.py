"""Self-describing typed records and their canonical text form.

A record is an ordered map of field names to values. Every value carries its
type implicitly (the Python type it is stored as), so a record can always
report its own schema without a registry:

    int64    -> int          float64 -> float        string -> str
    bool     -> bool         null    -> None         time   -> Timestamp
    array    -> tuple        record  -> TypedRecord

Text form, one record per line::

    {room_energy:80,unit:"watt",event_ts:2024-05-01T10:00:00Z}
"""

from __future__ import annotations

import calendar
import hashlib
import json
import math
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from functools import cached_property
from typing import Any, Iterable, Iterator, Mapping, Union

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

PRIMITIVE_TYPES = ("int64", "float64", "string", "bool", "null", "time")
# Types a value may be cast to (the `shape` operator's vocabulary).
CAST_TARGETS = ("int64", "float64", "string", "bool", "time")


class RecordError(ValueError):
    """Invalid record content (type conflict, out-of-range value, ...)."""


class RecordSyntaxError(RecordError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at position {pos}")


class CastError(RecordError):
    """A value has no documented conversion to the requested type."""


# --------------------------------------------------------------------------
# Timestamps
# --------------------------------------------------------------------------

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
# Representable range: 0001-01-01T00:00:00Z .. 9999-12-31T23:59:59.999999999Z
_TS_MIN_NS = -62135596800 * 1_000_000_000
_TS_MAX_NS = 253402300800 * 1_000_000_000 - 1
_TS_RE = re.compile(
    r"(\d{4})-(\d{2})-(\d{2})[Tt](\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?([Zz]|[+-]\d{2}:\d{2})"
)


@dataclass(frozen=True, order=True)
class Timestamp:
    """UTC instant with nanosecond precision (nanoseconds since the epoch)."""

    ns: int

    def __post_init__(self):
        if not _TS_MIN_NS <= self.ns <= _TS_MAX_NS:
            raise RecordError(f"timestamp outside years 0001-9999: {self.ns}ns")

    @classmethod
    def parse(cls, text: str) -> "Timestamp":
        m = _TS_RE.fullmatch(text)
        if not m:
            raise RecordError(f"not an RFC 3339 timestamp: {text!r}")
        return cls._from_match(m)

    @classmethod
    def _from_match(cls, m: re.Match) -> "Timestamp":
        y, mo, d, hh, mi, ss, frac, zone = m.groups()
        try:
            secs = calendar.timegm(
                datetime(int(y), int(mo), int(d), int(hh), int(mi), int(ss)).timetuple()
            )
        except ValueError as exc:
            raise RecordError(f"invalid timestamp {m.group(0)!r}: {exc}") from None
        if frac and len(frac) > 9:
            raise RecordError(f"timestamp precision finer than nanoseconds: {m.group(0)!r}")
        nanos = int((frac or "").ljust(9, "0"))
        if zone not in ("Z", "z"):
            sign = 1 if zone[0] == "+" else -1
            secs -= sign * (int(zone[1:3]) * 3600 + int(zone[4:6]) * 60)
        return cls(secs * 1_000_000_000 + nanos)

    @classmethod
    def from_datetime(cls, dt: datetime) -> "Timestamp":
        if dt.tzinfo is None:
            raise RecordError("naive datetime; timestamps must be zone-aware")
        delta = dt - _EPOCH
        return cls((delta.days * 86400 + delta.seconds) * 1_000_000_000 + delta.microseconds * 1000)

    def to_datetime(self) -> datetime:
        """Truncates to microseconds."""
        return _EPOCH + timedelta(microseconds=self.ns // 1000)

    def __add__(self, nanos: int) -> "Timestamp":
        return Timestamp(self.ns + nanos)

    def __str__(self) -> str:
        secs, nanos = divmod(self.ns, 1_000_000_000)
        dt = _EPOCH + timedelta(seconds=secs)
        base = f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}T{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}"
        if nanos:
            base += "." + f"{nanos:09d}".rstrip("0")
        return base + "Z"

    def __repr__(self) -> str:
        return f"Timestamp({self})"


Value = Union[None, bool, int, float, str, Timestamp, tuple, "TypedRecord"]


# --------------------------------------------------------------------------
# Types and schemas
# --------------------------------------------------------------------------

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _quote_name(name: str) -> str:
    return name if _IDENT_RE.fullmatch(name) else json.dumps(name, ensure_ascii=False)


def type_of(value: Value) -> str:
    """Canonical type descriptor of a value."""
    if value is None:
        return "null"
    if value is True or value is False:
        return "bool"
    t = type(value)
    if t is int:
        return "int64"
    if t is float:
        return "float64"
    if t is str:
        return "string"
    if t is Timestamp:
        return "time"
    if t is tuple:
        return _array_type(value)
    if t is TypedRecord:
        return value.schema.type_string
    raise RecordError(f"unsupported value {value!r}")


def _variant(type_string: str) -> str:
    if type_string.startswith("["):
        return "array"
    if type_string.startswith("{"):
        return "record"
    return type_string


def _array_type(items: tuple) -> str:
    types = []
    for item in items:
        if item is None:
            continue
        t = type_of(item)
        if t not in types:
            types.append(t)
    if not types:
        return "[null]"
    if len({_variant(t) for t in types}) > 1:
        raise RecordError(f"heterogeneous array: element types {sorted(types)}")
    return "[" + "|".join(sorted(types)) + "]"


@dataclass(frozen=True)
class Schema:
    """Ordered (field name, type descriptor) pairs."""

    fields: tuple[tuple[str, str], ...]

    def __post_init__(self):
        names = [n for n, _ in self.fields]
        if len(set(names)) != len(names):
            raise RecordError(f"duplicate field names in schema: {names}")

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse a canonical type string such as ``{watt:string,from:string}``."""
        parser = _TypeParser(text)
        t = parser.parse_type()
        parser.end()
        if not t.startswith("{"):
            raise RecordError(f"not a record type: {text!r}")
        return _schema_from_type_string(t)

    @cached_property
    def type_string(self) -> str:
        return "{" + ",".join(f"{_quote_name(n)}:{t}" for n, t in self.fields) + "}"

    @cached_property
    def fingerprint(self) -> int:
        return fingerprint(self)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.fields)

    def type_for(self, name: str) -> str | None:
        for n, t in self.fields:
            if n == name:
                return t
        return None

    def __str__(self) -> str:
        return self.type_string


def fingerprint(schema: Schema) -> int:
    """Stable 64-bit id of a schema's canonical type string."""
    digest = hashlib.sha256(schema.type_string.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def schema_of(rec: "TypedRecord") -> Schema:
    return rec.schema


class _TypeParser:
    _PRIM = re.compile(r"int64|float64|string|bool|null|time")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _ws(self):
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def _expect(self, ch: str):
        self._ws()
        if not self.text.startswith(ch, self.pos):
            raise RecordSyntaxError(f"expected {ch!r}", self.pos, self.text)
        self.pos += len(ch)

    def end(self):
        self._ws()
        if self.pos != len(self.text):
            raise RecordSyntaxError("trailing characters in type", self.pos, self.text)

    def parse_type(self) -> str:
        self._ws()
        if self.text.startswith("{", self.pos):
            self.pos += 1
            fields = []
            self._ws()
            if self.text.startswith("}", self.pos):
                self.pos += 1
                return "{}"
            while True:
                self._ws()
                name = self._name()
                self._expect(":")
                fields.append((name, self.parse_type()))
                self._ws()
                if self.text.startswith(",", self.pos):
                    self.pos += 1
                    continue
                self._expect("}")
                break
            return Schema(tuple(fields)).type_string
        if self.text.startswith("[", self.pos):
            self.pos += 1
            parts = [self.parse_type()]
            self._ws()
            while self.text.startswith("|", self.pos):
                self.pos += 1
                parts.append(self.parse_type())
            self._expect("]")
            return "[" + "|".join(sorted(set(parts))) + "]"
        m = self._PRIM.match(self.text, self.pos)
        if not m:
            raise RecordSyntaxError("expected a type", self.pos, self.text)
        self.pos = m.end()
        return m.group(0)

    def _name(self) -> str:
        if self.text.startswith('"', self.pos):
            m = _STRING_RE.match(self.text, self.pos)
            if not m:
                raise RecordSyntaxError("unterminated string", self.pos, self.text)
            self.pos = m.end()
            return json.loads(m.group(0))
        m = _IDENT_RE.match(self.text, self.pos)
        if not m:
            raise RecordSyntaxError("expected field name", self.pos, self.text)
        self.pos = m.end()
        return m.group(0)


def _schema_from_type_string(t: str) -> Schema:
    # t is canonical; split top-level fields.
    body = t[1:-1]
    fields: list[tuple[str, str]] = []
    depth = 0
    start = 0
    in_str = False
    parts = []
    i = 0
    while i < len(body):
        ch = body[i]
        if in_str:
            if ch == "\\":
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(body[start:i])
            start = i + 1
        i += 1
    if body:
        parts.append(body[start:])
    for part in parts:
        p = _TypeParser(part)
        name = p._name()
        p._expect(":")
        fields.append((name, part[p.pos:]))
    return Schema(tuple(fields))


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------

_MISSING = object()


def _normalize(value: Any) -> Value:
    if value is None or value is True or value is False:
        return value
    t = type(value)
    if t is int:
        if not INT64_MIN <= value <= INT64_MAX:
            raise RecordError(f"integer out of int64 range: {value}")
        return value
    if t is float:
        if not math.isfinite(value):
            raise RecordError(f"non-finite float: {value}")
        return value
    if t is str or t is Timestamp or t is TypedRecord:
        return value
    if isinstance(value, (list, tuple)):
        items = tuple(_normalize(v) for v in value)
        _array_type(items)
        return items
    if isinstance(value, Mapping):
        return TypedRecord(value)
    if isinstance(value, datetime):
        return Timestamp.from_datetime(value)
    if isinstance(value, bool):
        return bool(value)
    if isinstance(value, int):
        return _normalize(int(value))
    if isinstance(value, float):
        return _normalize(float(value))
    if isinstance(value, str):
        return str(value)
    raise RecordError(f"unsupported value type {type(value).__name__}: {value!r}")


class TypedRecord:
    """Immutable ordered record. Construct from a mapping or (name, value) pairs."""

    __slots__ = ("_names", "_values", "_index", "_schema", "_hash")

    def __init__(self, fields: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()):
        pairs = fields.items() if isinstance(fields, Mapping) else fields
        names = []
        values = []
        for name, value in pairs:
            if not isinstance(name, str) or not name:
                raise RecordError(f"invalid field name {name!r}")
            names.append(name)
            values.append(_normalize(value))
        self._init(tuple(names), tuple(values))

    def _init(self, names: tuple, values: tuple):
        self._names = names
        self._values = values
        self._index = {n: i for i, n in enumerate(names)}
        if len(self._index) != len(names):
            raise RecordError(f"duplicate field names: {list(names)}")
        self._schema = None
        self._hash = None
        for special in ("ts", "event_ts"):
            i = self._index.get(special)
            if i is not None and values[i] is not None and type(values[i]) is not Timestamp:
                raise RecordError(f"field {special!r} must be a timestamp")

    @classmethod
    def _trusted(cls, names: tuple, values: tuple) -> "TypedRecord":
        rec = cls.__new__(cls)
        rec._init(names, values)
        return rec

    # -- mapping-ish access ---------------------------------------------
    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def values(self) -> tuple:
        return self._values

    def items(self) -> Iterator[tuple[str, Value]]:
        return zip(self._names, self._values)

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> Value:
        return self._values[self._index[name]]

    def get(self, name: str, default: Any = None) -> Any:
        i = self._index.get(name)
        return default if i is None else self._values[i]

    @property
    def schema(self) -> Schema:
        if self._schema is None:
            self._schema = Schema(tuple(zip(self._names, map(type_of, self._values))))
        return self._schema

    # -- derivation --------------------------------------------------------
    def with_field(self, name: str, value: Any, *, before: str | None = None) -> "TypedRecord":
        """Replace ``name`` in place, or append it (before ``before`` if present)."""
        value = _normalize(value)
        i = self._index.get(name)
        if i is not None:
            values = self._values[:i] + (value,) + self._values[i + 1:]
            return TypedRecord._trusted(self._names, values)
        j = self._index.get(before) if before else None
        if j is None:
            return TypedRecord._trusted(self._names + (name,), self._values + (value,))
        return TypedRecord._trusted(
            self._names[:j] + (name,) + self._names[j:],
            self._values[:j] + (value,) + self._values[j:],
        )

    def without(self, names: Iterable[str]) -> "TypedRecord":
        drop = set(names)
        kept = [(n, v) for n, v in self.items() if n not in drop]
        return TypedRecord._trusted(tuple(n for n, _ in kept), tuple(v for _, v in kept))

    def select(self, names: Iterable[str]) -> "TypedRecord":
        names = tuple(names)
        return TypedRecord._trusted(names, tuple(self[n] for n in names))

    def renamed(self, old: str, new: str) -> "TypedRecord":
        names = tuple(new if n == old else n for n in self._names)
        return TypedRecord._trusted(names, self._values)

    def to_dict(self) -> dict[str, Value]:
        return dict(self.items())

    # -- identity -------------------------------------------------------------
    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TypedRecord):
            return NotImplemented
        if self._names != other._names:
            return False
        return self.schema == other.schema and self._values == other._values

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.schema.type_string, self._values))
        return self._hash

    def __repr__(self) -> str:
        return serialize_text(self)

    def __str__(self) -> str:
        return serialize_text(self)


def record(**fields: Any) -> TypedRecord:
    """Shorthand constructor: ``record(watt=80.0, unit="watt")``."""
    return TypedRecord(fields)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def format_float(x: float) -> str:
    text = repr(x)
    if text.endswith(".0"):
        return text[:-1]
    return text


def format_value(v: Value) -> str:
    if v is None:
        return "null"
    if v is True:
        return "true"
    if v is False:
        return "false"
    t = type(v)
    if t is int:
        return str(v)
    if t is float:
        return format_float(v)
    if t is str:
        return json.dumps(v, ensure_ascii=False)
    if t is Timestamp:
        return str(v)
    if t is tuple:
        return "[" + ",".join(format_value(x) for x in v) + "]"
    if t is TypedRecord:
        return serialize_text(v)
    raise RecordError(f"unsupported value {v!r}")


def serialize_text(rec: TypedRecord) -> str:
    return "{" + ",".join(f"{_quote_name(n)}:{format_value(v)}" for n, v in rec.items()) + "}"


def serialize_lines(records: Iterable[TypedRecord]) -> str:
    return "".join(serialize_text(r) + "\n" for r in records)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_STRING_RE = re.compile(r'"(?:[^"\\\n]|\\.)*"')
_NUMBER_RE = re.compile(r"-?(?:\d+\.\d*(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+)")
_TS_AT_RE = re.compile(_TS_RE.pattern)
_WS = " \t\r\n"


class _Parser:
    __slots__ = ("text", "pos", "n")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.n = len(text)

    def error(self, message: str) -> RecordSyntaxError:
        return RecordSyntaxError(message, self.pos, self.text)

    def ws(self):
        text, pos, n = self.text, self.pos, self.n
        while pos < n and text[pos] in _WS:
            pos += 1
        self.pos = pos

    def parse_record(self) -> TypedRecord:
        self.ws()
        if self.pos >= self.n or self.text[self.pos] != "{":
            raise self.error("expected '{'")
        self.pos += 1
        names: list[str] = []
        values: list[Value] = []
        self.ws()
        if self.pos < self.n and self.text[self.pos] == "}":
            self.pos += 1
            return TypedRecord._trusted((), ())
        while True:
            self.ws()
            start = self.pos
            names.append(self.parse_name())
            self.ws()
            if self.pos >= self.n or self.text[self.pos] != ":":
                raise self.error("expected ':'")
            self.pos += 1
            values.append(self.parse_value())
            self.ws()
            if self.pos >= self.n:
                raise self.error("unterminated record")
            ch = self.text[self.pos]
            self.pos += 1
            if ch == "}":
                break
            if ch != ",":
                self.pos -= 1
                raise self.error("expected ',' or '}'")
        try:
            return TypedRecord._trusted(tuple(names), tuple(values))
        except RecordError as exc:
            raise RecordSyntaxError(str(exc), start, self.text) from None

    def parse_name(self) -> str:
        if self.pos < self.n and self.text[self.pos] == '"':
            return self.parse_string()
        m = _IDENT_RE.match(self.text, self.pos)
        if not m:
            raise self.error("expected field name")
        self.pos = m.end()
        return m.group(0)

    def parse_string(self) -> str:
        m = _STRING_RE.match(self.text, self.pos)
        if not m:
            raise self.error("unterminated string")
        try:
            value = json.loads(m.group(0))
        except json.JSONDecodeError as exc:
            raise self.error(f"bad string escape: {exc.msg}") from None
        self.pos = m.end()
        return value

    def parse_value(self) -> Value:
        self.ws()
        if self.pos >= self.n:
            raise self.error("expected value")
        text = self.text
        ch = text[self.pos]
        if ch == '"':
            return self.parse_string()
        if ch == "{":
            return self.parse_record()
        if ch == "[":
            return self.parse_array()
        if ch.isdigit():
            m = _TS_AT_RE.match(text, self.pos)
            if m:
                start = self.pos
                self.pos = m.end()
                try:
                    return Timestamp._from_match(m)
                except RecordError as exc:
                    raise RecordSyntaxError(str(exc), start, text) from None
        if ch.isdigit() or ch == "-":
            m = _NUMBER_RE.match(text, self.pos)
            if not m:
                raise self.error("malformed number")
            start = self.pos
            self.pos = m.end()
            lit = m.group(0)
            if "." in lit or "e" in lit or "E" in lit:
                value = float(lit)
                if not math.isfinite(value):
                    raise RecordSyntaxError("float out of range", start, text)
                return value
            value = int(lit)
            if not INT64_MIN <= value <= INT64_MAX:
                raise RecordSyntaxError("integer out of int64 range", start, text)
            return value
        for word, value in (("true", True), ("false", False), ("null", None)):
            if text.startswith(word, self.pos):
                end = self.pos + len(word)
                if end < self.n and (text[end].isalnum() or text[end] == "_"):
                    break
                self.pos = end
                return value
        raise self.error("unexpected character " + repr(ch))

    def parse_array(self) -> tuple:
        start = self.pos
        self.pos += 1
        items: list[Value] = []
        self.ws()
        if self.pos < self.n and self.text[self.pos] == "]":
            self.pos += 1
            return ()
        while True:
            items.append(self.parse_value())
            self.ws()
            if self.pos >= self.n:
                raise self.error("unterminated array")
            ch = self.text[self.pos]
            self.pos += 1
            if ch == "]":
                break
            if ch != ",":
                self.pos -= 1
                raise self.error("expected ',' or ']'")
        result = tuple(items)
        try:
            _array_type(result)
        except RecordError as exc:
            raise RecordSyntaxError(str(exc), start, self.text) from None
        return result


def parse_text(line: str) -> TypedRecord:
    """Parse one record in canonical text form."""
    p = _Parser(line)
    rec = p.parse_record()
    p.ws()
    if p.pos != p.n:
        raise p.error("trailing characters after record")
    return rec


def parse_value_text(text: str) -> Value:
    p = _Parser(text)
    value = p.parse_value()
    p.ws()
    if p.pos != p.n:
        raise p.error("trailing characters after value")
    return value


def parse_lines(text: str) -> list[TypedRecord]:
    """Parse newline-delimited records, skipping blank lines."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parse_text(line))
        except RecordSyntaxError as exc:
            raise RecordSyntaxError(f"line {lineno}: {exc}", exc.pos, line) from None
    return out


# --------------------------------------------------------------------------
# Casting
# --------------------------------------------------------------------------

_INT_TEXT = re.compile(r"-?\d+")
_FLOAT_TEXT = re.compile(r"-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")


def cast_value(value: Value, target: str) -> Value:
    """Convert ``value`` to type ``target`` or raise CastError.

    Supported conversions: int64->float64 (exact only), numeric strings to
    int64/float64, numbers to decimal strings, bool<->"true"/"false",
    bool->int64/float64 (1/0), RFC 3339 strings to time. Null casts to null.
    """
    if value is None:
        return None
    source = type_of(value)
    if source == target:
        return value
    if target == "float64":
        if source == "int64":
            f = float(value)
            if int(f) != value:
                raise CastError(f"int64 {value} has no exact float64 form")
            return f
        if source == "string":
            if not _FLOAT_TEXT.fullmatch(value):
                raise CastError(f"cannot cast string {value!r} to float64")
            f = float(value)
            if not math.isfinite(f):
                raise CastError(f"float64 out of range: {value!r}")
            return f
        if source == "bool":
            return 1.0 if value else 0.0
    elif target == "int64":
        if source == "string":
            if not _INT_TEXT.fullmatch(value):
                raise CastError(f"cannot cast string {value!r} to int64")
            i = int(value)
            if not INT64_MIN <= i <= INT64_MAX:
                raise CastError(f"int64 out of range: {value!r}")
            return i
        if source == "bool":
            return 1 if value else 0
    elif target == "string":
        if source == "int64":
            return str(value)
        if source == "float64":
            return repr(value)
        if source == "bool":
            return "true" if value else "false"
        if source == "time":
            return str(value)
    elif target == "bool":
        if source == "string" and value in ("true", "false"):
            return value == "true"
    elif target == "time":
        if source == "string":
            try:
                return Timestamp.parse(value)
            except RecordError:
                raise CastError(f"cannot cast string {value!r} to time") from None
    raise CastError(f"cannot cast {source} to {target}")
