import threading

import pytest

from conftest import make_ctx
from ctxrouter.config import ConfigError, ContextDoc, load_documents, parse_document
from ctxrouter.context import AccessDenied, ContextState, UnknownEgress
from ctxrouter.flow import parse_pipeline
from ctxrouter.policy import AclTable
from ctxrouter.record import Schema, Timestamp, record
from ctxrouter.store import EmptyCommit, Lake

BIOHALL = """
kind: cot.dev/v1/Building
name: BioHall
role: building
ingress:
  - name: room_energy
    intent: ["cot.dev/*/Room@energy"]
    flow_agg: "energy:=sum(energy) by window"
  - name: room_occupancy
    intent: ["cot.dev/*/Room@occupancy"]
    patch_from: true
egress:
  - name: energy
    flow: "cut energy,window,event_ts,ts"
    policy: {mode: allow, roles: [staff, building]}
  - name: occupancy
    flow: "cut occupancy,event_ts,ts"
    policy: {mode: allow, roles: ["*"]}
"""

S4_ACL = AclTable.from_dict({"staff": ["*@energy", "*@occupancy"], "student": ["*@occupancy"]})


def biohall(tmp_path):
    doc = parse_document(load_documents(BIOHALL)[0])
    return ContextState(doc).attach(Lake(tmp_path, fsync=False))


def fill_view(ctx, egress, records):
    # a view commit as the maintenance edge would write it
    ctx.view_branch(egress).load(records, {}, stamp="stamp")


def test_instantiate_creates_pool_branches(tmp_path):
    ctx = biohall(tmp_path)
    assert ctx.branches == ["energy", "main", "occupancy"]
    assert [i.name for i in ctx.ingresses] == ["room_energy", "room_occupancy"]
    assert ctx.ingress("room_occupancy").patch_from
    assert str(ctx.kind) == "cot.dev/v1/Building"


def test_instantiate_without_ingress_or_egress(tmp_path):
    ctx = make_ctx("plain").attach(Lake(tmp_path, fsync=False))
    assert ctx.branches == ["main"]
    assert ctx.role == "plain"


def test_duplicate_egress_ids_rejected():
    with pytest.raises(ConfigError, match="duplicate egress"):
        parse_document({"kind": "a/b/c", "name": "x", "egress": [{"name": "e"}, {"name": "e"}]})


def test_invalid_pipeline_and_kind_rejected():
    with pytest.raises(ConfigError, match="flow"):
        ContextState(ContextDoc.model_validate({"kind": "a/b/c", "name": "x", "egress": [{"name": "e", "flow": "where ("}]}))
    with pytest.raises(ConfigError):
        parse_document({"kind": "a/b", "name": "x"})
    with pytest.raises(ConfigError, match="reserved"):
        parse_document({"kind": "a/b/c", "name": "x", "egress": [{"name": "errors"}]})


def test_egress_query_avg(tmp_path):
    ctx = biohall(tmp_path)
    fill_view(ctx, "occupancy", [record(occupancy=0.5), record(occupancy=1.0)])
    out = ctx.egress_query("occupancy", parse_pipeline("avg(occupancy)"), "staff", S4_ACL)
    assert [r.to_dict() for r in out] == [{"avg": 0.75}]


def test_egress_query_empty_view(tmp_path):
    ctx = biohall(tmp_path)
    assert ctx.egress_query("occupancy", parse_pipeline("sort occupancy | head"), "staff") == []


def test_student_denied_energy(tmp_path):
    ctx = biohall(tmp_path)
    with pytest.raises(AccessDenied):
        ctx.egress_query("energy", parse_pipeline("count()"), "student", S4_ACL)
    ctx.egress_query("occupancy", parse_pipeline("count()"), "student", S4_ACL)
    with pytest.raises(UnknownEgress):
        ctx.egress_query("noise", parse_pipeline("count()"), "staff", S4_ACL)


def test_missing_policy_closed_to_queries(tmp_path):
    ctx = make_ctx("d", egress=[{"name": "e"}]).attach(Lake(tmp_path, fsync=False))
    with pytest.raises(AccessDenied):
        ctx.egress_query("e", parse_pipeline("count()"), "anyone")


def test_ctx_load_timestamp_rule(tmp_path):
    ctx = biohall(tmp_path)
    e = Timestamp.parse("2020-01-01T00:00:00Z")
    ctx.ctx_load([record(a=1), record(a=2, event_ts=e)])
    a, b = ctx.main().records()
    assert a["event_ts"] == a["ts"]
    assert b["event_ts"] == e and b["ts"] > a["ts"]
    with pytest.raises(EmptyCommit):
        ctx.ctx_load([])


def test_advertised_schemas_declared_plus_observed(tmp_path):
    doc = {"kind": "a/b/c", "name": "x", "egress": [{"name": "e", "schemas": ["{watt:float64}"]}]}
    ctx = ContextState(ContextDoc.model_validate(doc)).attach(Lake(tmp_path, fsync=False))
    assert ctx.advertised_schemas("e") == [Schema.parse("{watt:float64}")]
    ctx.view_branch("e").load([record(power=1.0)], {}, stamp=None)
    assert ctx.advertised_schemas("e") == [Schema.parse("{watt:float64}"), Schema.parse("{power:float64}")]


def test_watch_delivers_commits_in_order(tmp_path):
    ctx = biohall(tmp_path)
    stop = threading.Event()
    got = []

    def consume(out):
        for cid, recs in ctx.egress_watch("occupancy", "staff", S4_ACL, stop=stop, poll=0.01):
            out.append((cid, [r["occupancy"] for r in recs]))
            if len(out) == 2:
                return

    subs = [[], []]
    threads = [threading.Thread(target=consume, args=(s,)) for s in subs]
    for t in threads:
        t.start()
    fill_view(ctx, "occupancy", [record(occupancy=0.5)])
    fill_view(ctx, "occupancy", [record(occupancy=1.0)])
    for t in threads:
        t.join(5)
    stop.set()
    assert subs[0] == subs[1] == [(0, [0.5]), (1, [1.0])]


def test_watch_denied_immediately(tmp_path):
    ctx = biohall(tmp_path)
    with pytest.raises(AccessDenied):
        ctx.egress_watch("energy", "student", S4_ACL)
