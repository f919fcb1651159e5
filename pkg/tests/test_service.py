import pytest
from fastapi.testclient import TestClient

from ctxrouter.record import parse_lines, serialize_lines, record
from ctxrouter.runtime import Runtime
from ctxrouter.service import create_app, listen_address, status_for

DOCS = """
kind: cot.dev/v1/motion
name: m1
egress:
  - name: detected
    flow: "cut detected,window,event_ts,ts"
    policy: {roles: ["*"]}
---
kind: cot.dev/v1/room
name: RoomA
ingress:
  - name: motion
    intent: ["*/*/motion@detected"]
    flow_agg: "occupancy:=max(d) by window"
    flow: "put d := detected | shape(this,<{d:float64}>)"
egress:
  - name: occupancy
    flow: "cut occupancy,window,event_ts,ts"
    policy: {roles: [staff]}
---
acl:
  staff: ["*@*"]
  student: ["*@detected"]
  RoomA: ["*@detected"]
"""


@pytest.fixture
def client(tmp_path):
    rt = Runtime(tmp_path / "d", fsync=False, background=False)
    with TestClient(create_app(rt)) as c:
        c.rt = rt
        yield c
    rt.close()


def setup(client):
    r = client.post("/apply", content=DOCS)
    assert r.status_code == 200, r.text
    assert client.post("/join", json={"child": "m1", "parent": "RoomA"}).status_code == 200


def test_apply_reports_per_document(client):
    r = client.post("/apply", content=DOCS)
    assert [x["status"] for x in r.json()["results"]] == ["created", "created", "acl"]
    bad = client.post("/apply", content="kind: a/b/c\nname: x\negress: [{name: e, flow: 'cut'}]\n")
    assert bad.status_code == 400 and bad.json()["results"][0]["status"] == "error"
    assert client.post("/apply", content="a: [").status_code == 400


def test_join_leave_and_conflicts(client):
    setup(client)
    r = client.post("/join", json={"child": "m1", "parent": "RoomA"})
    assert r.status_code == 409
    r = client.post("/leave", json={"child": "m1", "parent": "RoomA"})
    assert r.status_code == 200 and r.json()["changed"] == ["RoomA#motion"]
    assert client.post("/leave", json={"child": "m1", "parent": "RoomA"}).status_code == 409
    assert client.post("/join", json={"child": "ghost", "parent": "RoomA"}).status_code == 404
    assert client.post("/join", json={"child": "m1"}).status_code == 422


def test_load_and_query_round_trip(client):
    setup(client)
    body = serialize_lines([record(detected=True, window=0), record(detected=False, window=1)])
    r = client.post("/load", params={"ctx": "m1"}, content=body)
    assert r.status_code == 200 and r.json() == {"commit": 0, "count": 2}
    client.rt.quiesce()
    r = client.get("/query", params={"target": "RoomA@occupancy", "q": "sort window | cut window,occupancy"}, headers={"X-Role": "staff"})
    assert r.status_code == 200
    assert r.text == "{window:0,occupancy:1.}\n{window:1,occupancy:0.}\n"
    assert r.headers["X-Records-Scanned"] == "2"


def test_query_status_codes(client):
    setup(client)
    q = lambda target, pipe="", role="staff": client.get("/query", params={"target": target, "q": pipe}, headers={"X-Role": role})
    assert q("RoomA@occupancy", role="student").status_code == 403
    assert q("ghost@occupancy").status_code == 404
    assert q("RoomA@nope").status_code == 404
    assert q("RoomA@occupancy", "where (").status_code == 400
    assert q("nonsense").status_code == 400
    # a fan-out query skips what the role may not read instead of failing
    r = q("kind:*/*/room@occupancy", "count()", role="student")
    assert r.status_code == 200 and r.text == ""


def test_load_errors(client):
    setup(client)
    assert client.post("/load", params={"ctx": "ghost"}, content="{a:1}\n").status_code == 404
    assert client.post("/load", params={"ctx": "m1"}, content="{a:").status_code == 400
    assert client.post("/load", params={"ctx": "m1"}, content="").status_code == 400


def test_watch_stream(client):
    setup(client)
    for v in (True, False, True):
        client.post("/load", params={"ctx": "m1"}, content=serialize_lines([record(detected=v, window=0)]))
        client.rt.quiesce()
    student = {"X-Role": "student"}
    r = client.get("/watch", params={"target": "m1@detected", "q": "cut detected", "follow": "false"}, headers=student)
    assert r.status_code == 200
    assert r.text == "{detected:true}\n{detected:false}\n{detected:true}\n"
    r = client.get("/watch", params={"target": "m1@detected", "q": "cut detected", "from": 1, "limit": 1}, headers=student)
    assert r.text == "{detected:false}\n"
    assert client.get("/watch", params={"target": "RoomA@occupancy"}, headers={"X-Role": "student"}).status_code == 403
    assert client.get("/watch", params={"target": "m1@detected", "from": 99}, headers=student).status_code == 400


def test_contexts_listing(client):
    setup(client)
    body = client.get("/contexts").json()
    room = next(c for c in body if c["name"] == "RoomA")
    assert room["ingress"][0]["sources"] == ["m1@detected"]
    assert room["egress"] == [{"name": "occupancy", "branch": "occupancy"}]


def test_helpers(monkeypatch):
    monkeypatch.delenv("CTXR_LISTEN", raising=False)
    assert listen_address() == ("127.0.0.1", 8710)
    monkeypatch.setenv("CTXR_LISTEN", "0.0.0.0:9000")
    assert listen_address() == ("0.0.0.0", 9000)
    assert status_for(ValueError()) == 500


def test_app_opens_runtime_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CTXR_DATA_DIR", str(tmp_path / "env"))
    with TestClient(create_app()) as c:
        assert c.get("/healthz").json() == {"ok": True}
        assert c.post("/apply", content=DOCS).status_code == 200
    assert (tmp_path / "env" / "m1").is_dir()
