import statistics

import pytest
from hypothesis import given, settings, strategies as st

from ctxrouter.flow import (
    Aggregate,
    Cut,
    EvalReport,
    Head,
    Pipeline,
    PipelineSyntaxError,
    Rename,
    Shape,
    Sort,
    eval_batch_incremental,
    eval_pipeline,
    parse_pipeline,
    qcx,
)
from ctxrouter.flow.ast import (
    AggCall,
    BinOp,
    Discard,
    Extract,
    Field,
    HasField,
    HasType,
    Literal,
    LogSink,
    Neg,
    Not,
    Put,
    Trim,
    Where,
)
from ctxrouter.record import Timestamp, TypedRecord, parse_lines, parse_text, record

ENERGY_FLOW = "rename watt:=power | shape(this, <{watt:float64}>) | cut watt,event_ts,from"
T0 = Timestamp.parse("2024-05-01T10:00:00Z")


def energy_records():
    return [
        record(watt="80", **{"from": "biolab"}, event_ts=T0, ts=T0 + 1),
        record(watt=None, **{"from": "office"}, event_ts=T0, ts=T0 + 2),
        record(power=120.0, unit="watt", **{"from": "lounge"}, event_ts=T0, ts=T0 + 3),
    ]


# -- parsing -------------------------------------------------------------------

def test_parse_energy_cleanup_flow():
    p = parse_pipeline(ENERGY_FLOW)
    assert p.stages == (
        Rename((("watt", "power"),)),
        Shape((("watt", "float64"),)),
        Cut(("watt", "event_ts", "from")),
    )


def test_parse_empty_is_identity():
    assert parse_pipeline("") == Pipeline(())
    assert parse_pipeline("   ").is_identity


def test_parse_sort_head():
    assert parse_pipeline("sort occupancy | head").stages == (Sort("occupancy", False), Head(1))
    assert parse_pipeline("sort -r occupancy | head 2").stages == (Sort("occupancy", True), Head(2))


def test_parse_aggregates():
    p = parse_pipeline("count(), avg(x) by room, window")
    assert p.stages == (Aggregate((AggCall("count", "count", None), AggCall("avg", "avg", "x")), ("room", "window")),)
    p = parse_pipeline("occ:=max(occupancy) by from")
    assert p.stages[0].calls[0] == AggCall("occ", "max", "occupancy")


@pytest.mark.parametrize(
    "text",
    [
        "cut",
        "sort",
        "head 0",
        "where",
        "rename a:=b,a:=c",
        "shape(this,<{a:decimal}>)",
        "shape(that,<{a:int64}>)",
        "avg(x),avg(y)",
        "avg(x) | sum(y)",
        "median(x)",
        "cut a,,b",
        "where x >",
        "where (x > 1",
        "head | | cut a",
        "log(nolabel)",
        "frobnicate",
    ],
)
def test_syntax_errors(text):
    with pytest.raises(PipelineSyntaxError) as exc:
        parse_pipeline(text)
    assert 0 <= exc.value.pos <= len(text)


def test_syntax_error_position():
    with pytest.raises(PipelineSyntaxError) as exc:
        parse_pipeline("cut a | frobnicate x")
    assert exc.value.pos == 8


def test_expression_precedence():
    p = parse_pipeline("where a + b * 2 > 3 and !c or d == -1")
    expected = BinOp(
        "or",
        BinOp(
            "and",
            BinOp(">", BinOp("+", Field("a"), BinOp("*", Field("b"), Literal(2))), Literal(3)),
            Not(Field("c")),
        ),
        BinOp("==", Field("d"), Literal(-1)),
    )
    assert p.stages[0] == Where(expected)


# -- round trip over generated trees ----------------------------------------------

idents = st.sampled_from(["a", "b", "watt", "from", "event_ts", "x1", "room-1", "by", "true"])
literals = st.one_of(
    st.integers(-1000, 1000),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
    st.text(max_size=5),
    st.booleans(),
    st.none(),
    st.just(T0),
).map(Literal)
leaf_exprs = st.one_of(
    idents.map(Field),
    literals,
    idents.map(HasField),
    st.tuples(idents, st.sampled_from(["int64", "float64", "string", "bool", "time"])).map(lambda t: HasType(*t)),
)
ops = st.sampled_from(["+", "-", "*", "/", "==", "!=", "<", "<=", ">", ">=", "and", "or"])
exprs = st.recursive(
    leaf_exprs,
    lambda sub: st.one_of(
        st.tuples(ops, sub, sub).map(lambda t: BinOp(*t)),
        sub.map(Not),
        sub.filter(lambda e: not isinstance(e, Literal)).map(Neg),
    ),
    max_leaves=6,
)
field_lists = st.lists(idents, min_size=1, max_size=3, unique=True).map(tuple)
stages = st.one_of(
    exprs.map(Where),
    st.integers(1, 5).map(Head),
    st.tuples(idents, st.booleans()).map(lambda t: Sort(*t)),
    field_lists.map(Cut),
    field_lists.map(Extract),
    field_lists.map(Trim),
    st.tuples(idents, exprs).map(lambda t: Put(*t)),
    st.lists(st.tuples(idents, st.sampled_from(["int64", "float64", "string"])), min_size=1, max_size=3, unique_by=lambda p: p[0]).map(lambda f: Shape(tuple(f))),
    st.lists(st.tuples(idents, idents), min_size=1, max_size=2, unique_by=lambda p: p[0]).map(lambda f: Rename(tuple(f))),
    st.text(max_size=6).map(LogSink),
    st.tuples(st.text(max_size=6), st.booleans()).map(lambda t: Discard(*t)),
    st.sampled_from(["avg", "sum", "min", "max"]).map(lambda fn: Aggregate((AggCall("v", fn, "a"), AggCall("count", "count", None)), ("g",))),
)


@settings(max_examples=300, deadline=None)
@given(st.lists(stages, max_size=5))
def test_parse_render_round_trip(stage_list):
    p = Pipeline(tuple(stage_list))
    text = str(p)
    assert parse_pipeline(text) == p
    assert str(parse_pipeline(text)) == text


def test_literal_types_stay_distinct_in_round_trip():
    for text in ["where x == 1", "where x == 1.", "where x == true", 'where x == "1"']:
        p = parse_pipeline(text)
        assert parse_pipeline(str(p)) == p
    assert parse_pipeline("where x == 1") != parse_pipeline("where x == 1.")


# -- evaluation -----------------------------------------------------------------

def test_energy_cleanup_output():
    out = eval_pipeline(parse_pipeline(ENERGY_FLOW), energy_records())
    assert [r.names for r in out] == [("watt", "event_ts", "from")] * 3
    assert [r["watt"] for r in out] == [80.0, None, 120.0]
    assert type(out[0]["watt"]) is float and type(out[2]["watt"]) is float
    assert [r["from"] for r in out] == ["biolab", "office", "lounge"]


def test_identity():
    recs = energy_records()
    assert eval_pipeline(Pipeline(()), recs) == recs


def test_avg():
    out = eval_pipeline(parse_pipeline("avg(occupancy)"), [record(occupancy=0.5), record(occupancy=1.0)])
    assert out == [record(avg=0.75)]


def test_shape_rejects_bad_cast_and_keeps_field_count():
    report = EvalReport()
    recs = [record(w="1", u=1), record(w="watt", u=2), record(u=3)]
    out = eval_pipeline(parse_pipeline("shape(this,<{w:float64}>)"), recs, report)
    assert out == [record(w=1.0, u=1), record(u=3)]
    assert report.rejected_total == 1
    assert report.rejects[0][0] == recs[1]
    assert all(len(o) == len(i) for o, i in zip(out, [recs[0], recs[2]]))


def test_cut_rejects_missing_field():
    report = EvalReport()
    out = eval_pipeline(parse_pipeline("cut b,a"), [record(a=1, b=2, c=3), record(a=1)], report)
    assert out == [record(b=2, a=1)]
    assert report.rejected == {"cut: missing field b": 1}


def test_sort_stable_missing_last():
    recs = [record(k=2, i=0), record(i=1), record(k=1, i=2), record(k=2, i=3), record(k=None, i=4)]
    asc = eval_pipeline(parse_pipeline("sort k"), recs)
    assert [r["i"] for r in asc] == [2, 0, 3, 1, 4]
    desc = eval_pipeline(parse_pipeline("sort -r k"), recs)
    assert [r["i"] for r in desc] == [0, 3, 2, 1, 4]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), unique=True, max_size=20))
def test_sort_reverse_is_reverse_for_distinct_keys(keys):
    recs = [record(k=k) for k in keys]
    asc = eval_pipeline(parse_pipeline("sort k"), recs)
    desc = eval_pipeline(parse_pipeline("sort -r k"), recs)
    assert desc == list(reversed(asc))
    assert [r["k"] for r in asc] == sorted(keys)


def test_sort_mixed_numeric():
    out = eval_pipeline(parse_pipeline("sort k"), [record(k=2.5), record(k=1), record(k=2)])
    assert [r["k"] for r in out] == [1, 2, 2.5]


def test_head():
    recs = [record(i=i) for i in range(5)]
    assert eval_pipeline(parse_pipeline("head"), recs) == recs[:1]
    assert eval_pipeline(parse_pipeline("head 3"), recs) == recs[:3]
    assert eval_pipeline(parse_pipeline("head 9"), recs) == recs


def test_least_occupied_room():
    recs = parse_lines('{room:"A",occupancy:1.}\n{room:"B",occupancy:0.}\n{room:"C",occupancy:0.5}\n')
    out = eval_pipeline(parse_pipeline("sort occupancy | head"), recs)
    assert out == [recs[1]]


def test_where_semantics():
    report = EvalReport()
    recs = [record(x=1), record(x=-1), record(y=1), record(x=None), record(x="s"), record(x=0.5)]
    out = eval_pipeline(parse_pipeline("where x > 0"), recs, report)
    assert out == [record(x=1), record(x=0.5)]
    assert report.rejected_total == 1  # string vs int
    assert eval_pipeline(parse_pipeline("where x == null"), recs) == [record(x=None)]
    assert eval_pipeline(parse_pipeline("where has(y)"), recs) == [record(y=1)]
    assert eval_pipeline(parse_pipeline("where has(x, string)"), recs) == [record(x=None), record(x="s")]
    assert eval_pipeline(parse_pipeline("where !has(x)"), recs) == [record(y=1)]


def test_put_arithmetic():
    report = EvalReport()
    recs = [record(a=7, b=2), record(a=-7, b=2), record(a=1.0, b=4), record(a=1, b=0), record(b=1), record(a="s", b=1)]
    out = eval_pipeline(parse_pipeline("put c:=a/b"), recs, report)
    assert [r["c"] for r in out] == [3, -3, 0.25, None]
    assert report.rejected_total == 2
    out = eval_pipeline(parse_pipeline('put s:=a+"!"'), [record(a="hi")])
    assert out == [record(a="hi", s="hi!")]


def test_rename_semantics():
    report = EvalReport()
    recs = [record(power=1.0), record(watt=2.0), record(watt=3.0, power=4.0)]
    out = eval_pipeline(parse_pipeline("rename watt:=power"), recs, report)
    assert out == [record(watt=1.0), record(watt=2.0)]
    assert report.rejected_total == 1


def test_rename_into_ts_requires_timestamp():
    report = EvalReport()
    out = eval_pipeline(parse_pipeline("rename ts:=x"), [record(x=1)], report)
    assert out == [] and report.rejected_total == 1


def test_rule_stages():
    rec = record(watt="80", junk=1, ts=T0, event_ts=T0, **{"from": "x"})
    assert eval_pipeline(parse_pipeline("extract watt"), [rec]) == [record(watt="80", ts=T0, event_ts=T0, **{"from": "x"})]
    assert eval_pipeline(parse_pipeline("trim junk,nope"), [rec]) == [rec.without(["junk"])]
    report = EvalReport()
    assert eval_pipeline(parse_pipeline('reject("no rule") | head'), [rec], report) == []
    assert report.rejected == {"no rule": 1}
    report = EvalReport()
    assert eval_pipeline(parse_pipeline('drop("quiet")'), [rec, rec], report) == []
    assert report.dropped == 2 and report.rejected_total == 0
    report = EvalReport()
    assert eval_pipeline(parse_pipeline('log("seen")'), [rec], report) == [rec]
    assert report.logged == [("seen", rec)]


# -- aggregates, checked against python's statistics as an oracle ----------------

values_st = st.lists(st.one_of(st.none(), st.integers(-100, 100), st.floats(-1e6, 1e6)), max_size=30)


@settings(max_examples=200, deadline=None)
@given(values_st)
def test_aggregates_against_oracle(values):
    recs = [record(x=v) for v in values]
    out = eval_pipeline(parse_pipeline("count(),avg(x),sum(x),min(x),max(x)"), recs)
    if not values:
        # no input, no groups: nothing to report
        assert out == []
        return
    assert len(out) == 1
    got = out[0]
    present = [v for v in values if v is not None]
    assert got["count"] == len(values)
    if not present:
        assert got["avg"] is None and got["sum"] is None and got["min"] is None
        return
    any_float = any(type(v) is float for v in present)
    assert got["avg"] == pytest.approx(statistics.fmean(present), rel=1e-9, abs=1e-9)
    assert got["sum"] == pytest.approx(sum(present), rel=1e-9, abs=1e-6)
    assert got["min"] == min(present) and got["max"] == max(present)
    assert (type(got["sum"]) is float) == any_float
    assert (type(got["min"]) is float) == any_float


def test_group_by_first_appearance_order():
    recs = parse_lines("{g:\"b\",x:1}\n{g:\"a\",x:2}\n{g:\"b\",x:3}\n{g:1,x:4}\n{g:1.,x:5}\n{x:9}\n")
    report = EvalReport()
    out = eval_pipeline(parse_pipeline("sum(x) by g"), recs, report)
    assert out == parse_lines('{g:"b",sum:4}\n{g:"a",sum:2}\n{g:1,sum:4}\n{g:1.,sum:5}\n')
    assert report.rejected_total == 1


def test_chained_aggregates():
    recs = parse_lines(
        '{room:"A",w:1,o:1.}\n{room:"A",w:1,o:0.}\n{room:"B",w:1,o:0.}\n{room:"A",w:2,o:0.}\n{room:"B",w:2,o:1.}\n'
    )
    p = parse_pipeline("occ:=max(o) by room,w | o:=avg(occ) by w | avg(o)")
    assert eval_pipeline(p, recs) == [record(avg=0.5)]


def test_aggregate_type_errors_rejected():
    report = EvalReport()
    out = eval_pipeline(parse_pipeline("sum(x)"), [record(x=1), record(x="a")], report)
    assert out == [record(sum=1)]
    assert report.rejected_total == 1


# -- incremental ----------------------------------------------------------------

def test_incremental_running_mean():
    p = parse_pipeline("avg(x)")
    out1, state = eval_batch_incremental(p, [record(x=1)], None)
    out2, state = eval_batch_incremental(p, [record(x=3)], state)
    assert out1 == [record(avg=1.0)]
    assert out2 == [record(avg=2.0)]


def test_incremental_identity():
    batch = energy_records()
    out, state = eval_batch_incremental(Pipeline(()), batch, None)
    assert out == batch and state is None


def test_incremental_state_is_json_and_pipeline_bound():
    import json

    p = parse_pipeline("n:=count(),m:=max(t) by g")
    _, state = eval_batch_incremental(p, [record(g="a", t=T0), record(g="b", t=T0 + 5)], None)
    state = json.loads(json.dumps(state))
    out, _ = eval_batch_incremental(p, [record(g="a", t=T0 + 9)], state)
    assert out == [record(g="a", n=2, m=T0 + 9)]
    with pytest.raises(ValueError):
        eval_batch_incremental(parse_pipeline("count()"), [], state)


def test_incremental_emits_only_touched_groups():
    p = parse_pipeline("sum(x) by g")
    _, state = eval_batch_incremental(p, [record(g=1, x=1), record(g=2, x=1)], None)
    out, state = eval_batch_incremental(p, [record(g=2, x=5)], state)
    assert out == [record(g=2, sum=6)]


batch_pipelines = [
    "where x > 0",
    "put y:=x*2 | where y != 4",
    "shape(this,<{x:float64}>) | cut x",
    "rename z:=x | trim g",
]
rec_st = st.builds(
    lambda x, g: record(x=x, g=g),
    st.one_of(st.integers(-5, 5), st.none(), st.sampled_from(["3", "q"])),
    st.sampled_from(["a", "b"]),
)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(batch_pipelines), st.lists(st.lists(rec_st, max_size=6), max_size=5))
def test_incremental_partition_equivalence(text, batches):
    p = parse_pipeline(text)
    whole = [r for b in batches for r in b]
    expected_report = EvalReport()
    expected = eval_pipeline(p, whole, expected_report)
    got, state, report = [], None, EvalReport()
    for b in batches:
        out, state = eval_batch_incremental(p, b, state, report)
        got.extend(out)
    assert got == expected
    assert report.rejected == expected_report.rejected


@settings(max_examples=150, deadline=None)
@given(st.lists(st.lists(st.builds(lambda x, g: record(x=x, g=g), st.integers(0, 9), st.sampled_from("abc")), max_size=6), min_size=1, max_size=5))
def test_incremental_aggregate_final_state_matches_one_shot(batches):
    # the latest emitted row per group equals the one-shot answer
    p = parse_pipeline("s:=sum(x),n:=count() by g")
    latest, state = {}, None
    for b in batches:
        out, state = eval_batch_incremental(p, b, state)
        for r in out:
            latest[r["g"]] = r
    whole = eval_pipeline(p, [r for b in batches for r in b])
    assert {r["g"]: r for r in whole} == latest


# -- query complexity ------------------------------------------------------------

def test_qcx():
    assert qcx(["BioHall@occupancy"], parse_pipeline("avg(occupancy)")) == 3
    assert qcx([], Pipeline(())) == 0
    assert qcx(["A@e1", "B@e2"], parse_pipeline("sort f | head")) == 6
    assert qcx(["A@e"], parse_pipeline("count(),avg(x) by g | head")) == 5
