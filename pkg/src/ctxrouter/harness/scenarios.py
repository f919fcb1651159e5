"""Desk-scale campus scenarios, each returning a pass/fail report.

Every scenario opens a fresh runtime in a temporary directory, builds its
topology, feeds simulated devices deterministically from ``seed``, waits for
quiescence and then checks its answers against values computed directly from
the raw device records.
"""

from __future__ import annotations

import math
import tempfile
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable

from ctxrouter.context import AccessDenied
from ctxrouter.flow import eval_pipeline, parse_pipeline
from ctxrouter.harness.bench import compare, context_path, device_path
from ctxrouter.harness.topology import (
    BUILDING_OCCUPANCY_QUERY,
    LAPTOP_KIND,
    OPEN,
    Campus,
    build_campus,
    infra_acl,
    tenant_doc,
)
from ctxrouter.record import Timestamp, TypedRecord, parse_lines, record, type_of
from ctxrouter.runtime import Runtime

TOLERANCE = 1e-9

ENERGY_FLOW = "rename watt:=power | shape(this, <{watt:float64}>) | cut watt,event_ts,from"
S4_ACL = {
    "staff": ["*@netSpeed", "*@occupancy", "*@energy"],
    "student": ["BioLab@netSpeed", "BioLab@occupancy"],
}
S4_ROOMS = ["BioLab", "Office1", "Office2", "Lounge"]
OVERCROWDED_ROOMS = 3


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    name: str
    seed: int
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    def expect_equal(self, name: str, got, want) -> bool:
        return self.check(name, got == want, "" if got == want else f"got {got!r}, want {want!r}")

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def to_records(self) -> list[TypedRecord]:
        return [record(scenario=self.name, check=c.name, ok=c.ok, detail=c.detail) for c in self.checks]

    def summary(self) -> str:
        failed = [c for c in self.checks if not c.ok]
        head = f"{self.name} seed={self.seed}: {len(self.checks) - len(failed)}/{len(self.checks)} checks passed in {self.seconds:.2f}s"
        lines = [head] + [f"  {n}" for n in self.notes]
        lines += [f"  FAIL {c.name}: {c.detail}" for c in failed]
        return "\n".join(lines)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= TOLERANCE


def _close_map(got: dict, want: dict) -> bool:
    return set(got) == set(want) and all(_close(got[k], want[k]) for k in want)


# -- oracles over raw device records -------------------------------------------------------------


def room_occupancy_oracle(campus: Campus) -> dict:
    """room -> window -> 1.0 if any motion record in the window detected someone."""
    out = {}
    for room in campus.rooms:
        per = {}
        for rec in campus.rt.context(campus.motion[room]).main().records():
            per[rec["window"]] = max(per.get(rec["window"], 0.0), 1.0 if rec["detected"] else 0.0)
        out[room] = per
    return out


def room_energy_oracle(campus: Campus) -> dict:
    out = {}
    for room in campus.rooms:
        per: dict = defaultdict(float)
        for rec in campus.rt.context(campus.appliance[room]).main().records():
            per[rec["window"]] += rec["power"]
        out[room] = dict(per)
    return out


def view_convergence(rt: Runtime) -> list[str]:
    """Egresses whose view differs (as a multiset) from the egress flow over the store."""
    bad = []
    for info in rt.describe():
        ctx = rt.context(info["name"])
        main = list(ctx.main().records())
        for spec in ctx.egresses:
            view = Counter(ctx.view_branch(spec.name).records())
            want = Counter(eval_pipeline(spec.flow, main))
            if view != want:
                bad.append(f"{ctx.name}@{spec.name}: view has {sum(view.values())} records, flow over store gives {sum(want.values())}")
    return bad


def _runtime(tmp: str) -> Runtime:
    return Runtime(tmp, fsync=False, background=False)


def _settle(rt: Runtime):
    if not rt.quiesce(120):
        raise RuntimeError("pipelets did not quiesce")


# -- scenarios ---------------------------------------------------------------------------------------


def s1_query(seed: int = 0, rooms: int = 4, records_per_device: int = 360) -> ScenarioReport:
    """Query single rooms, rank rooms across contexts, and pair two egresses per room."""
    report = ScenarioReport("s1_query", seed)
    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, rooms)
        campus.feed(records_per_device, seed)
        _settle(rt)
        occ = room_occupancy_oracle(campus)
        energy = room_energy_oracle(campus)

        for room in campus.rooms:
            res = rt.query(f"{room}@occupancy", "occupancy:=max(occupancy) by window | sort window", role="staff")
            got = {r["window"]: r["occupancy"] for r in res.records}
            report.check(f"{room} occupancy per window", _close_map(got, occ[room]), f"{len(got)} windows vs {len(occ[room])}")

        mean_occ = {room: sum(v.values()) / len(v) for room, v in occ.items() if v}
        total_energy = {room: sum(v.values()) for room, v in energy.items()}

        # the least used room, ranked across every room context at once
        res = rt.query("kind:*/*/room@occupancy", "occ:=max(occupancy) by _ctx,window | occupancy:=avg(occ) by _ctx | sort occupancy | head", role="staff")
        least = min(mean_occ.values())
        report.check(
            "least occupied room",
            len(res.records) == 1 and _close(res.records[0]["occupancy"], least) and mean_occ[res.records[0]["_ctx"]] == least,
            f"got {res.records}, want occupancy {least}",
        )
        res = rt.query("kind:*/*/room@occupancy", "sort occupancy | head", role="staff")
        lowest = min(r["occupancy"] for room in campus.rooms for r in rt.context(room).view_branch("occupancy").records())
        got = [(r["_ctx"], r["occupancy"]) for r in res.records]
        report.check("lowest occupancy record", len(got) == 1 and got[0][1] == lowest, f"got {got}, want occupancy {lowest}")

        res = rt.query("kind:*/*/room@energy", "e:=max(energy) by _ctx,window | energy:=sum(e) by _ctx | sort -r energy | head", role="staff")
        most = max(total_energy.values())
        report.check(
            "most energy consuming room",
            len(res.records) == 1 and _close(res.records[0]["energy"], most),
            f"got {res.records}, want {most}",
        )

        # occupancy and energy of each room side by side, matched on _ctx
        o = rt.query("kind:*/*/room@occupancy", "occ:=max(occupancy) by _ctx,window | occupancy:=avg(occ) by _ctx", role="staff")
        e = rt.query("kind:*/*/room@energy", "e:=max(energy) by _ctx,window | energy:=sum(e) by _ctx", role="staff")
        pairs = {r["_ctx"]: [r["occupancy"], None] for r in o.records}
        for r in e.records:
            pairs.setdefault(r["_ctx"], [None, None])[1] = r["energy"]
        ok = set(pairs) == set(campus.rooms) and all(
            _close(pairs[room][0], mean_occ[room]) and _close(pairs[room][1], total_energy[room]) for room in campus.rooms
        )
        report.check("occupancy/energy pairs per room", ok, f"got {pairs}")
        r = _pearson([p[0] for p in pairs.values() if None not in p], [p[1] for p in pairs.values() if None not in p])
        report.notes.append(f"occupancy/energy correlation across rooms r={r:.3f}")

        bad = view_convergence(rt)
        report.check("views match egress flows over stores", not bad, "; ".join(bad))
    return report


def _pearson(xs: list, ys: list) -> float:
    n = len(xs)
    if n < 2:
        return float("nan")
    mx, my = sum(xs) / n, sum(ys) / n
    sx = math.sqrt(sum((x - mx) ** 2 for x in xs))
    sy = math.sqrt(sum((y - my) ** 2 for y in ys))
    if sx == 0 or sy == 0:
        return float("nan")
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / (sx * sy)


def s2_compose(seed: int = 0, rooms: int = 4, records_per_device: int = 240) -> ScenarioReport:
    """The building reuses room egresses as its sources."""
    report = ScenarioReport("s2_compose", seed)
    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, rooms)
        # fixed case: alternate rooms occupied in window 0
        occupied = [1.0 if k % 2 == 0 else 0.0 for k in range(rooms)]
        for k, room in enumerate(campus.rooms):
            rt.load(campus.motion[room], [record(detected=bool(occupied[k]), window=0)])
            rt.load(campus.appliance[room], [record(power=100.0 * (k + 1), window=0)])
        _settle(rt)
        want = sum(occupied) / rooms
        res = rt.query(f"{campus.building}@occupancy", BUILDING_OCCUPANCY_QUERY, role="staff")
        report.check(f"building occupancy for rooms {occupied}", [(r["window"], r["occupancy"]) for r in res.records] == [(0, want)], f"got {res.records}")
        res = rt.query(f"{campus.building}@occupancy", "avg(occupancy)", role="staff")
        report.check("avg(occupancy) over the building view", len(res.records) == 1 and _close(res.records[0]["avg"], want), f"got {res.records}")
        res = rt.query(f"{campus.building}@energy", "sum(energy)", role="staff")
        want_e = sum(100.0 * (k + 1) for k in range(rooms))
        report.check("building energy", len(res.records) == 1 and _close(res.records[0]["sum"], want_e), f"got {res.records}, want {want_e}")
        froms = {tuple(r["from"]) for r in rt.context(campus.building).view_branch("occupancy").records()}
        report.expect_equal("building records name their room", froms, {(f"{room}@occupancy",) for room in campus.rooms})

    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, rooms)
        campus.feed(records_per_device, seed)
        _settle(rt)
        ctx, dev = context_path(campus), device_path(campus)
        diff = compare(ctx.occupancy, dev.occupancy, "occupancy") + compare(ctx.energy, dev.energy, "energy")
        report.check("generated data: building answers match device records", not diff, "; ".join(diff[:5]))
        report.notes.append(f"context path scanned {ctx.scanned}, device path {dev.scanned}")
    return report


def s3_opportunistic(seed: int = 0, rooms: int = 4) -> ScenarioReport:
    """Tenant devices join and leave rooms as they move; rooms expose their network tests."""
    report = ScenarioReport("s3_opportunistic", seed)
    tests: dict = defaultdict(list)  # room -> (download, upload)

    def measure(device: str, room: str, n: int):
        recs = []
        for i in range(n):
            down, up = float(10 * (seed + 1) + len(tests[room]) + i), float(seed + i + 1)
            recs.append(record(download=down, upload=up, ap=room))
        tests[room].extend((r["download"], r["upload"]) for r in recs)
        rt.load(device, recs)

    def speeds(room: str) -> Counter:
        return Counter((r["download"], r["upload"]) for r in rt.query(f"{room}@netSpeed", role="staff").records)

    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, rooms)
        a, b = campus.rooms[0], campus.rooms[1 % rooms]
        rt.apply([tenant_doc("Phone"), tenant_doc("Laptop", LAPTOP_KIND)])
        report.expect_equal("nothing ingested before joining", speeds(a), Counter())

        rt.join("Phone", a)
        measure("Phone", a, 3)
        _settle(rt)
        report.expect_equal(f"phone tests reach {a}", speeds(a), Counter(tests[a]))

        rt.leave("Phone", a)
        rt.join("Phone", b)
        measure("Phone", b, 2)
        _settle(rt)
        report.expect_equal(f"phone tests reach {b} after moving", speeds(b), Counter(tests[b]))
        report.expect_equal(f"{a} keeps only its own tests", speeds(a), Counter(tests[a]))
        report.check(f"phone no longer sources {a}", all(s.context != "Phone" for s in rt.source_map()[(a, "netTest")]))

        rt.join("Laptop", a)
        measure("Laptop", a, 2)
        _settle(rt)
        report.expect_equal(f"laptop tests join the phone's in {a}", speeds(a), Counter(tests[a]))
        for room in campus.rooms[2:]:
            report.expect_equal(f"{room} never saw a tenant", speeds(room), Counter())
        bad = view_convergence(rt)
        report.check("views match egress flows over stores", not bad, "; ".join(bad))
    return report


def s4_policy(seed: int = 0, rooms: int = 4) -> ScenarioReport:
    """Staff read every room; students only BioLab occupancy and network speed."""
    report = ScenarioReport("s4_policy", seed)
    names = (S4_ROOMS + [f"Office{i}" for i in range(3, rooms + 1)])[:max(rooms, 1)]
    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, names=names)
        rt.set_acl({**S4_ACL, **infra_acl()})
        campus.feed(60, seed)
        _settle(rt)

        def allowed(role: str, target: str) -> bool:
            try:
                rt.query(target, "count()", role=role)
                return True
            except AccessDenied:
                return False

        report.expect_equal("student denied BioHall@energy", allowed("student", "BioHall@energy"), False)
        report.expect_equal("student allowed BioLab@occupancy", allowed("student", "BioLab@occupancy"), True)
        report.expect_equal("student allowed BioLab@netSpeed", allowed("student", "BioLab@netSpeed"), True)
        for room in names[1:]:
            report.expect_equal(f"student denied {room}@occupancy", allowed("student", f"{room}@occupancy"), False)
        energy_targets = [f"{c['name']}@energy" for c in rt.describe() if any(e["name"] == "energy" for e in c["egress"])]
        report.expect_equal("staff allowed every *@energy", {t: allowed("staff", t) for t in energy_targets}, {t: True for t in energy_targets})
        res = rt.query("kind:*/*/room@occupancy", "count()", role="student")
        report.expect_equal("student fan-out reaches BioLab only", res.contexts, ["BioLab"])
        res = rt.query("kind:*/*/room@energy", "count()", role="staff")
        report.expect_equal("staff fan-out reaches every room", sorted(res.contexts), sorted(names))

        # a student-owned app asks for building energy three ways; it must never get it
        app = {
            "kind": "cot.dev/v1/app",
            "name": "StudyApp",
            "role": "student",
            "ingress": [
                {"name": "energy", "sources": ["BioHall@energy"]},
                {"name": "building", "intent": ["cot.dev/*/Building@energy", "any@energy"]},
                {"name": "lab", "sources": ["BioLab@occupancy"]},
            ],
        }
        rt.apply([app])

        def sources(ingress: str) -> set:
            return {s.label for s in rt.source_map()[("StudyApp", ingress)]}

        def never_energy(step: str):
            got = sources("energy") | sources("building")
            report.check(f"student app has no BioHall@energy ({step})", "BioHall@energy" not in got, f"got {sorted(got)}")

        never_energy("after apply")
        rt.leave("BioHall", "StudyApp")
        rt.join("BioHall", "StudyApp")
        never_energy("after explicit rejoin")
        rt.set_acl({**S4_ACL, **infra_acl()})
        never_energy("after ACL reload")
        report.expect_equal("student app sources BioLab@occupancy", sources("lab"), {"BioLab@occupancy"})
    return report


def s6_automation(seed: int = 0, rooms: int = 4, records_per_device: int = 240) -> ScenarioReport:
    """Overcrowding alerts from the building's occupancy egress.

    Two paths raise alerts: an app that watches the egress, and an
    automation context whose ingress routes alerts to its log sink.
    """
    report = ScenarioReport("s6_automation", seed)
    alert_flow = f"occ:=max(occupancy) by from,window | occupied:=sum(occ) by window | where occupied >= {OVERCROWDED_ROOMS}."
    guard = {
        "kind": "cot.dev/v1/automation",
        "name": "Guard",
        "role": "automation",
        "ingress": [{"name": "alerts", "sources": ["BioHall@occupancy"], "flow_agg": f'{alert_flow} | log("overcrowded")'}],
    }
    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        campus = build_campus(rt, rooms)
        rt.apply([guard])
        campus.feed(records_per_device, seed, p_detect={room: 0.08 for room in campus.rooms})
        _settle(rt)

        occ = room_occupancy_oracle(campus)
        windows = set().union(*[set(v) for v in occ.values()]) if occ else set()
        want = {w for w in windows if sum(occ[room].get(w, 0.0) for room in campus.rooms) >= OVERCROWDED_ROOMS}

        # app path: room counts only grow, so the first alert for a window is final
        head = rt.view_head("BioHall@occupancy")
        watched = set()
        if head:
            for cid, recs in rt.watch("BioHall@occupancy", alert_flow, role="automation"):
                watched.update(r["window"] for r in recs)
                if cid >= head - 1:
                    break
        report.expect_equal("watch handler alerts on overcrowded windows", sorted(watched), sorted(want))

        logged = {r["_record"]["window"] for r in rt.context("Guard").log_branch().records() if r["_log"] == "overcrowded"}
        report.expect_equal("log sink alerts on overcrowded windows", sorted(logged), sorted(want))
        report.notes.append(f"{len(want)} of {len(windows)} windows overcrowded (>= {OVERCROWDED_ROOMS} rooms occupied)")
    return report


S7_RECORDS = (
    '{watt:"80",from:"biolab"}',
    '{watt:null,from:"office"}',
    '{power:120.,unit:"watt",from:"lounge"}',
)


def s7_records() -> list[TypedRecord]:
    return parse_lines("\n".join(S7_RECORDS) + "\n")


def s7_heterogeneous(seed: int = 0, rooms: int = 4) -> ScenarioReport:
    """A phone ingests energy readings with mixed names and types from every room it visits."""
    report = ScenarioReport("s7_heterogeneous", seed)
    recs = s7_records()
    pipeline = parse_pipeline(ENERGY_FLOW)
    out = eval_pipeline(pipeline, [r.with_field("event_ts", Timestamp.parse("2024-01-01T00:00:00Z")) for r in recs])
    _check_s7(report, "pipeline", out, {"watt", "event_ts", "from"})

    meters = [str(r["from"]) for r in recs]
    with tempfile.TemporaryDirectory() as tmp, _runtime(tmp) as rt:
        docs = [{"kind": "cot.dev/v1/meter", "name": m, "egress": [{"name": "energy", "policy": OPEN}]} for m in meters]
        docs.append({"kind": "cot.dev/v1/phone", "name": "Phone", "ingress": [{"name": "energy", "intent": ["any@energy"], "flow": ENERGY_FLOW}]})
        # the same cleanup via match:action rules chosen per incoming schema
        docs.append(
            {
                "kind": "cot.dev/v1/phone",
                "name": "Tablet",
                "ingress": [
                    {
                        "name": "energy",
                        "intent": ["any@energy"],
                        "rules": ["has <power: float64> -> rename watt:=power"],
                        "flow": "shape(this, <{watt:float64}>) | cut watt,event_ts,from",
                    }
                ],
            }
        )
        rt.apply(docs)
        for m, r in zip(meters, recs):
            rt.load(m, [r])
            for visitor in ("Phone", "Tablet"):
                rt.join(m, visitor)
            _settle(rt)
            for visitor in ("Phone", "Tablet"):
                rt.leave(m, visitor)
        loaded = {m: rt.context(m).main().records()[0] for m in meters}
        for visitor in ("Phone", "Tablet"):
            got = list(rt.context(visitor).main().records())
            _check_s7(report, visitor, got, {"watt", "event_ts", "from", "ts"})
            kept = all(r["event_ts"] == loaded[r["from"]]["event_ts"] for r in got)
            report.check(f"{visitor}: event_ts carried from the meter", kept)
    return report


def _check_s7(report: ScenarioReport, where: str, out: list[TypedRecord], fields: set):
    report.expect_equal(f"{where}: watt values", sorted((r.get("watt") for r in out), key=lambda v: (v is not None, v)), [None, 80.0, 120.0])
    types = sorted(type_of(r.get("watt")) for r in out)
    report.expect_equal(f"{where}: watt types", types, ["float64", "float64", "null"])
    report.expect_equal(f"{where}: fields", [set(r.names) for r in out], [fields] * len(out))
    report.expect_equal(f"{where}: from", sorted(r["from"] for r in out), ["biolab", "lounge", "office"])


SCENARIOS: dict[str, Callable[..., ScenarioReport]] = {
    "s1_query": s1_query,
    "s2_compose": s2_compose,
    "s3_opportunistic": s3_opportunistic,
    "s4_policy": s4_policy,
    "s6_automation": s6_automation,
    "s7_heterogeneous": s7_heterogeneous,
}


def scenario(name: str, seed: int = 0, rooms: int = 4) -> ScenarioReport:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    start = time.monotonic()
    report = fn(seed=seed, rooms=rooms)
    report.seconds = time.monotonic() - start
    return report
