"""Dataflow pipeline language: parse, render, evaluate."""

from ctxrouter.flow.ast import (
    AggCall,
    Aggregate,
    Cut,
    Discard,
    Extract,
    Head,
    LogSink,
    Pipeline,
    Put,
    Rename,
    Shape,
    Sort,
    Trim,
    Where,
)
from ctxrouter.flow.evaluate import EvalReport, eval_batch_incremental, eval_expr, eval_pipeline, qcx
from ctxrouter.flow.parser import PipelineSyntaxError, parse_expr, parse_pipeline, validate

__all__ = [
    "AggCall",
    "Aggregate",
    "Cut",
    "Discard",
    "EvalReport",
    "Extract",
    "Head",
    "LogSink",
    "Pipeline",
    "PipelineSyntaxError",
    "Put",
    "Rename",
    "Shape",
    "Sort",
    "Trim",
    "Where",
    "eval_batch_incremental",
    "eval_expr",
    "eval_pipeline",
    "parse_expr",
    "parse_pipeline",
    "qcx",
    "validate",
]
