"""Composition of the contextualized dataflow graph.

When a child context joins a parent, every ingress of the parent whose
sourcing intents match the child picks up the child's matching, permitted
egresses as sources. Each source carries the ingress's match:action rules
compiled into a pipeline prefix that reconciles the source's schemas. Leaving
removes the child's sources from the parent again.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

from ctxrouter.config import Kind
from ctxrouter.flow import EvalReport, Pipeline, eval_pipeline, parse_pipeline
from ctxrouter.flow.ast import Aggregate, Discard, Extract, Head, LogSink, Sort
from ctxrouter.flow.parser import PipelineSyntaxError
from ctxrouter.policy import AclTable, EgressPolicy, authorize
from ctxrouter.record import RecordError, Schema, Timestamp, TypedRecord, _TypeParser

log = logging.getLogger(__name__)


class CompositionError(Exception):
    status = 400


class UnknownContext(CompositionError):
    status = 404


class DuplicateAssociation(CompositionError):
    status = 409


class NoAssociation(CompositionError):
    status = 409


class RuleError(ValueError):
    pass


# -- sourcing intents ------------------------------------------------------------

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")
_PART = re.compile(r"\*|[A-Za-z0-9_][A-Za-z0-9_.\-]*")


@dataclass(frozen=True)
class SourcingIntent:
    selector: str  # "direct", "kind" or "any"
    value: str  # context name, or normalized g/v/n pattern; "any" for any
    egress: str

    def __str__(self) -> str:
        if self.selector == "any":
            return f"any@{self.egress}"
        prefix = "name:" if self.selector == "direct" else "kind:"
        return f"{prefix}{self.value}@{self.egress}"

    def matches(self, name: str, kind: Kind) -> bool:
        if self.selector == "direct":
            return self.value == name
        return match_kind(self.value, kind)


def normalize_kind_pattern(text: str) -> str:
    if text in ("any", "*"):
        return "any"
    parts = text.split("/")
    if len(parts) == 1:
        parts = ["*", "*", parts[0]]
    if len(parts) != 3 or not all(_PART.fullmatch(p) for p in parts):
        raise RuleError(f"kind pattern must be g/v/n (components may be '*'): {text!r}")
    return "/".join(parts)


def parse_intent(text: str, direct: bool = False) -> SourcingIntent:
    """Parse ``[kind:|name:]SELECTOR@EGRESS``.

    Without a prefix: ``any`` is the wildcard, a selector containing ``/`` is
    a kind pattern, anything else names a context directly. ``direct=True``
    forces a name (used for config ``sources``).
    """
    sel, sep, egress = text.strip().rpartition("@")
    if not sep or not sel or not _NAME.fullmatch(egress):
        raise RuleError(f"intent must look like selector@egress: {text!r}")
    if direct or sel.startswith("name:"):
        name = sel[5:] if sel.startswith("name:") else sel
        if not _NAME.fullmatch(name):
            raise RuleError(f"invalid context name in intent {text!r}")
        return SourcingIntent("direct", name, egress)
    if sel.startswith("kind:"):
        pattern = normalize_kind_pattern(sel[5:])
    elif sel in ("any", "*") or "/" in sel:
        pattern = normalize_kind_pattern(sel)
    else:
        if not _NAME.fullmatch(sel):
            raise RuleError(f"invalid context name in intent {text!r}")
        return SourcingIntent("direct", sel, egress)
    if pattern == "any":
        return SourcingIntent("any", "any", egress)
    return SourcingIntent("kind", pattern, egress)


def match_kind(pattern: str, kind: Kind) -> bool:
    """``any``; exact ``g/v/n``; ``g/*/n``; ``*/*/n`` (any component may be ``*``)."""
    pattern = normalize_kind_pattern(pattern)
    if pattern == "any":
        return True
    g, v, n = pattern.split("/")
    return (g in ("*", kind.group)) and (v in ("*", kind.version)) and (n in ("*", kind.name))


# -- match:action rules ------------------------------------------------------------


@dataclass(frozen=True)
class HasMatch:
    fields: tuple  # ((name, type), ...)

    def __str__(self) -> str:
        return "has <" + ", ".join(f"{n}: {t}" for n, t in self.fields) + ">"


@dataclass(frozen=True)
class SchemaMatch:
    type_string: str

    def __str__(self) -> str:
        return f"schema {self.type_string}"


@dataclass(frozen=True)
class AllMatch:
    parts: tuple

    def __str__(self) -> str:
        return "all(" + ", ".join(map(str, self.parts)) + ")"


@dataclass(frozen=True)
class AnyMatch:
    parts: tuple

    def __str__(self) -> str:
        return "any(" + ", ".join(map(str, self.parts)) + ")"


@dataclass(frozen=True)
class WildcardMatch:
    def __str__(self) -> str:
        return "*"


def match_schema(m, schema: Schema) -> Optional[tuple]:
    """Return the matched field names, or None when the schema does not match.

    ``has`` accepts a field whose observed type is null: a null carries no
    type information to contradict the rule.
    """
    if isinstance(m, WildcardMatch):
        return schema.names
    if isinstance(m, HasMatch):
        for name, t in m.fields:
            actual = schema.type_for(name)
            if actual is None or (actual != t and actual != "null"):
                return None
        return tuple(n for n, _ in m.fields)
    if isinstance(m, SchemaMatch):
        return schema.names if schema.type_string == m.type_string else None
    if isinstance(m, AllMatch):
        out: list = []
        for part in m.parts:
            got = match_schema(part, schema)
            if got is None:
                return None
            out.extend(f for f in got if f not in out)
        return tuple(out)
    if isinstance(m, AnyMatch):
        for part in m.parts:
            got = match_schema(part, schema)
            if got is not None:
                return got
        return None
    raise TypeError(f"unknown match {m!r}")


def _split_top(text: str) -> list[str]:
    parts, depth, start, in_str = [], 0, 0, False
    i = 0
    while i < len(text):
        ch = text[i]
        if in_str:
            if ch == "\\":
                i += 1
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "([{<":
            depth += 1
        elif ch in ")]}>":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
        i += 1
    parts.append(text[start:])
    return [p.strip() for p in parts]


def parse_match(text: str):
    t = text.strip()
    if t == "*":
        return WildcardMatch()
    for word, cls in (("all", AllMatch), ("any", AnyMatch)):
        if t.startswith(word) and t[len(word):].lstrip().startswith("(") and t.endswith(")"):
            inner = t[len(word):].lstrip()[1:-1]
            parts = tuple(parse_match(p) for p in _split_top(inner))
            if not parts:
                raise RuleError(f"empty {word}()")
            return cls(parts)
    if t.startswith("has"):
        rest = t[3:].strip()
        if not (rest.startswith("<") and rest.endswith(">")):
            raise RuleError(f"expected has <field: type>: {text!r}")
        fields = []
        for item in _split_top(rest[1:-1]):
            name, sep, type_text = item.partition(":")
            name = name.strip().strip('"')
            if not sep or not name:
                raise RuleError(f"expected field: type in {text!r}")
            tp = _TypeParser(type_text.strip())
            try:
                typ = tp.parse_type()
                tp.end()
            except RecordError:
                raise RuleError(f"bad type {type_text.strip()!r} in {text!r}") from None
            fields.append((name, typ))
        return HasMatch(tuple(fields))
    if t.startswith("schema"):
        try:
            return SchemaMatch(Schema.parse(t[6:].strip()).type_string)
        except RecordError as exc:
            raise RuleError(f"bad schema in {text!r}: {exc}") from None
    raise RuleError(f"unknown match {text!r}")


_PER_RECORD_ONLY = (Aggregate, Head, Sort)


@dataclass(frozen=True)
class Action:
    kind: str  # extract reject drop accept log trim rename convert
    pipeline: Pipeline = Pipeline(())  # stages for log/trim/rename/convert

    def __str__(self) -> str:
        if self.kind in ("extract", "reject", "drop", "accept"):
            return self.kind
        if self.kind == "convert":
            return f"convert {self.pipeline}"
        return str(self.pipeline)


def parse_action(text: str) -> Action:
    t = text.strip()
    word = t.split("(", 1)[0].split(None, 1)[0] if t else ""
    if t in ("extract", "reject", "drop", "accept"):
        return Action(t)
    try:
        if word in ("trim", "rename", "log"):
            p = parse_pipeline(t)
            if len(p) != 1:
                raise RuleError(f"action {t!r} must be a single stage")
            return Action(word, p)
        if word == "convert":
            p = parse_pipeline(t[len("convert"):])
            bad = [s for s in p.stages if isinstance(s, _PER_RECORD_ONLY)]
            if bad:
                raise RuleError(f"convert fragments must be per-record stages, found {bad[0]}")
            return Action("convert", p)
    except PipelineSyntaxError as exc:
        raise RuleError(f"bad action {t!r}: {exc.message}") from None
    raise RuleError(f"unknown action {t!r}")


@dataclass(frozen=True)
class MatchActionRule:
    match: object
    action: Action

    def __str__(self) -> str:
        return f"{self.match} -> {self.action}"


def parse_rule(spec) -> MatchActionRule:
    """Accept ``{"match": ..., "action": ...}`` or the string ``MATCH -> ACTION``."""
    if isinstance(spec, str):
        match_text, sep, action_text = spec.rpartition("->")
        if not sep:
            raise RuleError(f"rule must be 'match -> action': {spec!r}")
    else:
        match_text, action_text = spec["match"], spec["action"]
    return MatchActionRule(parse_match(match_text), parse_action(action_text))


def parse_rules(specs: Iterable) -> tuple:
    rules = tuple(parse_rule(s.model_dump() if hasattr(s, "model_dump") else s) for s in specs)
    for i, r in enumerate(rules[:-1]):
        if isinstance(r.match, WildcardMatch):
            raise RuleError(f"wildcard rule must be last (rule {i + 1} of {len(rules)})")
    return rules


def compile_action(rule: MatchActionRule, matched: tuple) -> Pipeline:
    a = rule.action
    if a.kind == "extract":
        return Pipeline((Extract(tuple(matched)),))
    if a.kind == "reject":
        return Pipeline((Discard(f"rule: {rule.match} -> reject", True),))
    if a.kind == "drop":
        return Pipeline((Discard(f"rule: {rule.match} -> drop", False),))
    if a.kind == "accept":
        return Pipeline(())
    return a.pipeline


UNMATCHED_REASON = "rule: no rule matches schema"


def compile_prefix(rules: Sequence[MatchActionRule], schema: Schema, unmatched: str) -> Pipeline:
    if not rules:
        return Pipeline(())
    for rule in rules:
        matched = match_schema(rule.match, schema)
        if matched is not None:
            return compile_action(rule, matched)
    if unmatched == "reject":
        return Pipeline((Discard(UNMATCHED_REASON, True),))
    if unmatched == "drop":
        return Pipeline((Discard(UNMATCHED_REASON, False),))
    return Pipeline(())


class CompiledInjection:
    """Per-schema pipeline prefixes derived from an ingress's rules.

    Prefixes for the schemas advertised at join time are compiled eagerly;
    schemas first seen in data are compiled on demand with the same rules.
    Equality depends only on the rules and the unmatched-schema policy.
    """

    def __init__(self, rules: Sequence[MatchActionRule] = (), unmatched: str = "accept", schemas: Iterable[Schema] = ()):
        self.rules = tuple(rules)
        self.unmatched = unmatched
        self._prefixes: dict[str, Pipeline] = {}
        for s in schemas:
            self.prefix_for(s)

    def __eq__(self, other):
        return isinstance(other, CompiledInjection) and (self.rules, self.unmatched) == (other.rules, other.unmatched)

    def __hash__(self):
        return hash((self.rules, self.unmatched))

    def __repr__(self):
        return f"CompiledInjection({len(self.rules)} rules, unmatched={self.unmatched})"

    @property
    def is_identity(self) -> bool:
        return not self.rules

    @property
    def prefixes(self) -> dict[str, Pipeline]:
        return dict(self._prefixes)

    def prefix_for(self, schema: Schema) -> Pipeline:
        key = schema.type_string
        p = self._prefixes.get(key)
        if p is None:
            p = compile_prefix(self.rules, schema, self.unmatched)
            self._prefixes[key] = p
        return p

    def apply(self, records: Sequence[TypedRecord], report: Optional[EvalReport] = None) -> list[TypedRecord]:
        if self.is_identity:
            return list(records)
        out: list[TypedRecord] = []
        run: list[TypedRecord] = []
        run_schema = None
        for rec in records:
            s = rec.schema
            if run and s != run_schema:
                out.extend(eval_pipeline(self.prefix_for(run_schema), run, report))
                run = []
            run_schema = s
            run.append(rec)
        if run:
            out.extend(eval_pipeline(self.prefix_for(run_schema), run, report))
        return out


def compile_injection(rules: Sequence[MatchActionRule], schemas: Iterable[Schema], unmatched: str = "accept") -> CompiledInjection:
    return CompiledInjection(rules, unmatched, schemas)


# -- composition ---------------------------------------------------------------------


class ContextLike(Protocol):
    name: str
    kind: Kind
    role: str

    def ingress_specs(self) -> Sequence: ...

    def egress_specs(self) -> Sequence: ...

    def advertised_schemas(self, egress: str) -> list[Schema]: ...


@dataclass(frozen=True)
class Source:
    context: str
    egress: str
    injection: CompiledInjection = field(compare=True)

    @property
    def label(self) -> str:
        return f"{self.context}@{self.egress}"


@dataclass
class Association:
    child: str
    parent: str
    joined_at: Timestamp
    left_at: Optional[Timestamp] = None

    @property
    def open(self) -> bool:
        return self.left_at is None

    def to_record(self, op: str) -> TypedRecord:
        at = self.joined_at if op == "join" else self.left_at
        return TypedRecord([("op", op), ("child", self.child), ("parent", self.parent), ("at", at)])


@dataclass
class Delta:
    """Source-list changes caused by one composition event, keyed by (context, ingress)."""

    association: Optional[Association]
    changes: dict = field(default_factory=dict)  # (ctx, ingress) -> (old tuple, new tuple)

    @property
    def changed(self) -> list:
        return list(self.changes)


SourceMap = dict  # (ctx, ingress) -> tuple[Source, ...]


class Composer:
    """Maintains the source map incrementally; serialized by the caller."""

    def __init__(
        self,
        contexts: dict,
        acl: Callable[[], Optional[AclTable]] = lambda: None,
        clock: Callable[[], int] = None,
        persist: Optional[Callable[[TypedRecord], None]] = None,
    ):
        import time

        self.contexts = contexts  # name -> ContextLike, shared with the owner
        self.acl = acl
        self.clock = clock or time.time_ns
        self.persist = persist
        self.history: list[Association] = []
        self.open: dict[tuple[str, str], Association] = {}
        self.sources: SourceMap = {}
        self._last_ns = 0

    def _now(self) -> Timestamp:
        ns = max(self.clock(), self._last_ns + 1)
        self._last_ns = ns
        return Timestamp(ns)

    # -- registry -----------------------------------------------------------------
    def register(self, ctx: ContextLike):
        for spec in ctx.ingress_specs():
            self.sources.setdefault((ctx.name, spec.name), ())

    def _get(self, name: str) -> ContextLike:
        ctx = self.contexts.get(name)
        if ctx is None:
            raise UnknownContext(f"unknown context {name!r}")
        return ctx

    # -- Algorithm core --------------------------------------------------------------
    def pair_sources(self, child: ContextLike, parent: ContextLike, ingress) -> list[Source]:
        acl = self.acl()
        found: list[Source] = []
        for intent in ingress.intents:
            if not intent.matches(child.name, child.kind):
                continue
            for egress in child.egress_specs():
                if egress.name != intent.egress:
                    continue
                target = f"{child.name}@{egress.name}"
                if not authorize(egress.policy, acl, parent.role, target, at_join=True):
                    log.info("join %s -> %s: %s denied to role %s", child.name, parent.name, target, parent.role)
                    continue
                injection = compile_injection(ingress.rules, child.advertised_schemas(egress.name), ingress.unmatched)
                src = Source(child.name, egress.name, injection)
                if all(s.label != src.label for s in found):
                    found.append(src)
        return found

    def on_join(self, child: str, parent: str) -> Delta:
        if child == parent:
            raise CompositionError(f"context {child!r} cannot join itself")
        y = self._get(child)
        x = self._get(parent)
        if (child, parent) in self.open:
            raise DuplicateAssociation(f"{child} already joined {parent}")
        assoc = Association(child, parent, self._now())
        delta = Delta(assoc)
        for ingress in x.ingress_specs():
            key = (parent, ingress.name)
            old = self.sources.get(key, ())
            labels = {s.label for s in old}
            added = [s for s in self.pair_sources(y, x, ingress) if s.label not in labels]
            if added:
                new = old + tuple(added)
                self.sources[key] = new
                delta.changes[key] = (old, new)
        self.open[(child, parent)] = assoc
        self.history.append(assoc)
        if self.persist:
            self.persist(assoc.to_record("join"))
        return delta

    def on_leave(self, child: str, parent: str) -> Delta:
        assoc = self.open.get((child, parent))
        if assoc is None:
            raise NoAssociation(f"{child} has not joined {parent}")
        x = self.contexts.get(parent)
        delta = Delta(assoc)
        ingress_names = [i.name for i in x.ingress_specs()] if x is not None else []
        for name in ingress_names:
            key = (parent, name)
            old = self.sources.get(key, ())
            new = tuple(s for s in old if s.context != child)
            if new != old:
                self.sources[key] = new
                delta.changes[key] = (old, new)
        assoc.left_at = self._now()
        del self.open[(child, parent)]
        if self.persist:
            self.persist(assoc.to_record("leave"))
        return delta

    def resolve_all(self) -> SourceMap:
        """Recompute every source list from the open associations alone."""
        result: SourceMap = {}
        for ctx in self.contexts.values():
            for spec in ctx.ingress_specs():
                result[(ctx.name, spec.name)] = ()
        for (child, parent), _ in sorted(self.open.items(), key=lambda kv: kv[1].joined_at):
            y = self.contexts.get(child)
            x = self.contexts.get(parent)
            if y is None or x is None:
                continue
            for ingress in x.ingress_specs():
                key = (parent, ingress.name)
                have = result[key]
                labels = {s.label for s in have}
                add = [s for s in self.pair_sources(y, x, ingress) if s.label not in labels]
                result[key] = have + tuple(add)
        return result

    def direct_pairs(self, name: str) -> list[tuple[str, str]]:
        """(child, parent) pairs implied by direct intents touching ``name``."""
        pairs = []
        me = self.contexts.get(name)
        if me is None:
            return pairs
        for spec in me.ingress_specs():
            for intent in spec.intents:
                if intent.selector == "direct" and intent.value != name and intent.value in self.contexts:
                    pairs.append((intent.value, name))
        for other in self.contexts.values():
            if other.name == name:
                continue
            for spec in other.ingress_specs():
                for intent in spec.intents:
                    if intent.selector == "direct" and intent.value == name:
                        pairs.append((name, other.name))
        seen = []
        for p in pairs:
            if p not in seen and p not in self.open:
                seen.append(p)
        return seen

    # -- persistence ---------------------------------------------------------------------
    def restore(self, events: Iterable[TypedRecord]):
        """Rebuild associations from persisted join/leave records (sources untouched)."""
        for ev in events:
            key = (ev["child"], ev["parent"])
            if ev["op"] == "join":
                assoc = Association(ev["child"], ev["parent"], ev["at"])
                self.open[key] = assoc
                self.history.append(assoc)
            elif key in self.open:
                self.open.pop(key).left_at = ev["at"]
            self._last_ns = max(self._last_ns, ev["at"].ns)
