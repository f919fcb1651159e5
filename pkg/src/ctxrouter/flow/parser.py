"""Recursive-descent parser for pipeline text."""

from __future__ import annotations

import re

from ctxrouter.flow.ast import (
    AGG_FUNCS,
    KEYWORDS,
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
from ctxrouter.record import CAST_TARGETS, RecordSyntaxError, _Parser, _TypeParser


class PipelineSyntaxError(ValueError):
    def __init__(self, message: str, pos: int, text: str):
        self.message = message
        self.pos = pos
        self.text = text
        super().__init__(f"{message} at position {pos}: {text!r}")


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT = re.compile(r"\d+")


class _PipelineParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.n = len(text)

    # -- low level -----------------------------------------------------------
    def error(self, message: str, pos: int | None = None) -> PipelineSyntaxError:
        return PipelineSyntaxError(message, self.pos if pos is None else pos, self.text)

    def ws(self):
        while self.pos < self.n and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, token: str) -> bool:
        self.ws()
        return self.text.startswith(token, self.pos)

    def accept(self, token: str) -> bool:
        if self.peek(token):
            self.pos += len(token)
            return True
        return False

    def expect(self, token: str):
        if not self.accept(token):
            raise self.error(f"expected {token!r}")

    def peek_word(self) -> str | None:
        self.ws()
        m = _IDENT.match(self.text, self.pos)
        return m.group(0) if m else None

    def accept_word(self, word: str) -> bool:
        if self.peek_word() == word:
            self.pos += len(word)
            return True
        return False

    def at_end(self) -> bool:
        self.ws()
        return self.pos >= self.n

    def name(self) -> str:
        """A field name: identifier or double-quoted string."""
        self.ws()
        if self.peek('"'):
            return self.string()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            raise self.error("expected field name")
        self.pos = m.end()
        return m.group(0)

    def name_list(self) -> tuple[str, ...]:
        names = [self.name()]
        while self.accept(","):
            names.append(self.name())
        return tuple(names)

    def string(self) -> str:
        self.ws()
        p = _Parser(self.text)
        p.pos = self.pos
        try:
            value = p.parse_string()
        except RecordSyntaxError as exc:
            raise self.error(str(exc).rsplit(" at position", 1)[0], exc.pos) from None
        self.pos = p.pos
        return value

    def type_name(self, allowed=None) -> str:
        self.ws()
        tp = _TypeParser(self.text)
        tp.pos = self.pos
        try:
            t = tp.parse_type()
        except RecordSyntaxError as exc:
            raise self.error("expected a type", exc.pos) from None
        if allowed is not None and t not in allowed:
            raise self.error(f"type {t!r} not allowed here (expected one of {', '.join(allowed)})")
        self.pos = tp.pos
        return t

    # -- pipeline ------------------------------------------------------------
    def pipeline(self) -> Pipeline:
        if self.at_end():
            return Pipeline(())
        stages = [self.stage()]
        while True:
            if self.at_end():
                break
            if not self.accept("|"):
                raise self.error("expected '|' or end of pipeline")
            stages.append(self.stage())
        pipeline = Pipeline(tuple(stages))
        validate(pipeline, self.text)
        return pipeline

    def stage(self):
        self.ws()
        start = self.pos
        word = self.peek_word()
        if word is None:
            if self.peek('"'):
                return self.aggregate()
            raise self.error("expected a pipeline stage")
        after = self.pos + len(word)
        rest = self.text[after:].lstrip()
        if rest.startswith(":="):
            return self.aggregate()
        if word in AGG_FUNCS and rest.startswith("("):
            return self.aggregate()
        self.pos = after
        if word == "where":
            return Where(self.expr())
        if word == "head":
            self.ws()
            m = _INT.match(self.text, self.pos)
            if m:
                self.pos = m.end()
                n = int(m.group(0))
                if n < 1:
                    raise self.error("head count must be positive", m.start())
                return Head(n)
            return Head(1)
        if word == "sort":
            desc = False
            self.ws()
            if self.text.startswith("-r", self.pos) and not _IDENT.match(self.text, self.pos + 2):
                self.pos += 2
                desc = True
            return Sort(self.name(), desc)
        if word in ("cut", "extract", "trim"):
            fields = self.name_list()
            if len(set(fields)) != len(fields):
                raise self.error(f"duplicate field in {word}", start)
            return {"cut": Cut, "extract": Extract, "trim": Trim}[word](fields)
        if word == "rename":
            pairs = [self.assignment_pair()]
            while self.accept(","):
                pairs.append(self.assignment_pair())
            targets = [n for n, _ in pairs]
            if len(set(targets)) != len(targets):
                raise self.error("rename targets must be distinct", start)
            return Rename(tuple(pairs))
        if word == "put":
            target = self.name()
            self.expect(":=")
            return Put(target, self.expr())
        if word == "shape":
            self.expect("(")
            if not self.accept_word("this"):
                raise self.error("expected 'this'")
            self.expect(",")
            self.expect("<")
            self.expect("{")
            fields = []
            while True:
                f = self.name()
                self.expect(":")
                fields.append((f, self.type_name(CAST_TARGETS)))
                if self.accept(","):
                    continue
                self.expect("}")
                break
            self.expect(">")
            self.expect(")")
            names = [f for f, _ in fields]
            if len(set(names)) != len(names):
                raise self.error("duplicate field in shape", start)
            return Shape(tuple(fields))
        if word == "log":
            self.expect("(")
            label = self.string()
            self.expect(")")
            return LogSink(label)
        if word in ("reject", "drop"):
            self.expect("(")
            reason = self.string()
            self.expect(")")
            return Discard(reason, word == "reject")
        self.pos = start
        raise self.error(f"unknown stage {word!r}")

    def assignment_pair(self) -> tuple[str, str]:
        new = self.name()
        self.expect(":=")
        return new, self.name()

    def aggregate(self) -> Aggregate:
        start = self.pos
        calls = [self.agg_call()]
        while self.accept(","):
            calls.append(self.agg_call())
        by: tuple[str, ...] = ()
        if self.accept_word("by"):
            by = self.name_list()
        outputs = [c.output for c in calls] + list(by)
        if len(set(outputs)) != len(outputs):
            raise self.error("aggregate output names must be distinct (use out:=fn(x))", start)
        return Aggregate(tuple(calls), by)

    def agg_call(self) -> AggCall:
        self.ws()
        start = self.pos
        output = None
        first = self.name()
        if self.accept(":="):
            output = first
            self.ws()
            start = self.pos
            fn = self.name()
        else:
            fn = first
        if fn not in AGG_FUNCS:
            raise self.error(f"unknown aggregate function {fn!r}", start)
        self.expect("(")
        field = None
        if fn == "count":
            self.expect(")")
        else:
            field = self.name()
            self.expect(")")
        return AggCall(output or fn, fn, field)

    # -- expressions ----------------------------------------------------------
    def expr(self) -> Expr:
        left = self.and_expr()
        while self.accept_word("or"):
            left = BinOp("or", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.accept_word("and"):
            left = BinOp("and", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.peek("!") and not self.peek("!="):
            self.pos += 1
            return Not(self.not_expr())
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        for op in ("==", "!=", "<=", ">=", "<", ">"):
            if self.accept(op):
                return BinOp(op, left, self.additive())
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while True:
            if self.accept("+"):
                left = BinOp("+", left, self.multiplicative())
            elif self.peek("-"):
                self.pos += 1
                left = BinOp("-", left, self.multiplicative())
            else:
                return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while True:
            if self.accept("*"):
                left = BinOp("*", left, self.unary())
            elif self.accept("/"):
                left = BinOp("/", left, self.unary())
            else:
                return left

    def unary(self) -> Expr:
        self.ws()
        if self.text.startswith("-", self.pos):
            nxt = self.text[self.pos + 1: self.pos + 2]
            if not nxt.isdigit():
                self.pos += 1
                return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        self.ws()
        if self.pos >= self.n:
            raise self.error("unexpected end of expression")
        ch = self.text[self.pos]
        if ch == "(":
            self.pos += 1
            inner = self.expr()
            self.expect(")")
            return inner
        if ch == "`":
            end = self.text.find("`", self.pos + 1)
            if end < 0:
                raise self.error("unterminated field reference")
            name = self.text[self.pos + 1: end]
            if not name:
                raise self.error("empty field reference")
            self.pos = end + 1
            return Field(name)
        word = self.peek_word()
        if word == "has":
            self.pos += 3
            self.expect("(")
            f = self.name()
            if self.accept(","):
                t = self.type_name()
                self.expect(")")
                return HasType(f, t)
            self.expect(")")
            return HasField(f)
        if word is not None and word not in ("true", "false", "null"):
            if word in KEYWORDS:
                raise self.error(f"unexpected keyword {word!r}")
            self.pos += len(word)
            return Field(word)
        p = _Parser(self.text)
        p.pos = self.pos
        try:
            value = p.parse_value()
        except RecordSyntaxError as exc:
            raise self.error("expected an expression", exc.pos) from None
        self.pos = p.pos
        return Literal(value)


def validate(pipeline: Pipeline, text: str = "") -> None:
    """Structural checks that apply to parsed and composed pipelines alike."""
    ungrouped = [s for s in pipeline.stages if isinstance(s, Aggregate) and not s.by]
    if len(ungrouped) > 1:
        raise PipelineSyntaxError("at most one ungrouped aggregate per pipeline", 0, text or str(pipeline))


def parse_pipeline(text: str) -> Pipeline:
    return _PipelineParser(text).pipeline()


def parse_expr(text: str) -> Expr:
    p = _PipelineParser(text)
    e = p.expr()
    if not p.at_end():
        raise p.error("trailing characters after expression")
    return e
