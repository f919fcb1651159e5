import pytest
from click.testing import CliRunner

from ctxrouter.harness.bench import bench_query_orientation, compare, device_path
from ctxrouter.harness.cli import main
from ctxrouter.harness.crash import crash_test, durability_test
from ctxrouter.harness.scenarios import SCENARIOS, scenario, view_convergence
from ctxrouter.harness.topology import BUILDING_OCCUPANCY_QUERY, EPOCH, WINDOW_S, build_campus
from ctxrouter.record import record
from ctxrouter.runtime import GeneratorConnector, Runtime


@pytest.fixture
def rt(tmp_path):
    with Runtime(tmp_path / "d", fsync=False, background=False) as r:
        yield r


@pytest.mark.parametrize("name", list(SCENARIOS))
def test_scenarios_pass(name):
    report = scenario(name, seed=0)
    assert report.passed, report.summary()
    assert len(report.to_records()) == len(report.checks)


def test_scenarios_deterministic_per_seed():
    a = scenario("s1_query", seed=5)
    b = scenario("s1_query", seed=5)
    assert [(c.name, c.detail) for c in a.checks] == [(c.name, c.detail) for c in b.checks]
    assert a.notes == b.notes


def test_unknown_scenario():
    with pytest.raises(ValueError, match="s1_query"):
        scenario("s5_supply")


def test_two_of_four_rooms_occupied(rt):
    campus = build_campus(rt, 4)
    for room, detected in zip(campus.rooms, [True, False, True, False]):
        rt.load(campus.motion[room], [record(detected=detected, window=0)])
    rt.quiesce()
    res = rt.query("BioHall@occupancy", BUILDING_OCCUPANCY_QUERY, role="staff")
    assert [(r["window"], r["occupancy"]) for r in res.records] == [(0, 0.5)]


def test_room_occupied_if_any_detection_in_window(rt):
    campus = build_campus(rt, 1)
    dev = campus.motion["Room1"]
    rt.load(dev, [record(detected=False, window=0), record(detected=True, window=0), record(detected=False, window=0)])
    rt.load(dev, [record(detected=False, window=1)])
    rt.quiesce()
    res = rt.query("Room1@occupancy", "occupancy:=max(occupancy) by window | sort window", role="staff")
    assert [(r["window"], r["occupancy"]) for r in res.records] == [(0, 1.0), (1, 0.0)]


def test_generator_windows_follow_virtual_time(rt):
    campus = build_campus(rt, 1, join=False)
    GeneratorConnector(rt, campus.motion["Room1"], lambda i, t, rng: record(window=int(t // WINDOW_S)), 0.2, 130, seed=0, epoch=EPOCH).run()
    recs = rt.context(campus.motion["Room1"]).main().records()
    assert len(recs) == 26
    assert [r["window"] for r in recs].count(0) == 12
    assert recs[0]["event_ts"] == EPOCH


def test_device_path_oracle_by_hand(rt):
    campus = build_campus(rt, 2, join=False)
    rt.load(campus.motion["Room1"], [record(detected=True, window=0), record(detected=False, window=1)])
    rt.load(campus.motion["Room2"], [record(detected=False, window=0), record(detected=False, window=1)])
    rt.load(campus.appliance["Room1"], [record(power=1.5, window=0), record(power=2.0, window=0)])
    rt.load(campus.appliance["Room2"], [record(power=4.0, window=1)])
    dev = device_path(campus)
    assert dev.occupancy == {0: 0.5, 1: 0.0}
    assert dev.energy == {0: 3.5, 1: 4.0}
    assert dev.scanned == 7


def test_compare_reports_differences():
    assert compare({0: 0.5}, {0: 0.5 + 1e-12}, "x") == []
    assert compare({0: 0.5}, {0: 0.75}, "x") == ["x[0]: context 0.5 != device 0.75"]
    assert "windows differ" in compare({0: 1.0}, {1: 1.0}, "x")[0]


def test_bench_small():
    report = bench_query_orientation(rooms=2, records_per_device=120, seed=1)
    assert report.equal, report.mismatches
    assert report.context.scanned < report.device.scanned
    assert report.passed


def test_bench_empty():
    report = bench_query_orientation(rooms=1, records_per_device=0)
    assert report.context.occupancy == {} and report.device.occupancy == {}
    assert report.context.energy == {} and report.device.energy == {}
    assert report.passed


def test_view_convergence_detects_a_tampered_view(rt):
    campus = build_campus(rt, 1)
    rt.load(campus.motion["Room1"], [record(detected=True, window=0)])
    rt.quiesce()
    assert view_convergence(rt) == []
    rt.context("Room1").view_branch("occupancy").load([record(occupancy=0.0, window=9)])
    assert view_convergence(rt) == ["Room1@occupancy: view has 2 records, flow over store gives 1"]


def test_crash_baseline_without_kills():
    report = crash_test(records=500, kills=0, seed=1)
    assert report.passed, report.summary()
    assert report.tally == 500


def test_crash_with_kills():
    report = crash_test(records=1500, kills=8, seed=3)
    assert report.passed, report.summary()
    assert len(report.fired) == 8


def test_crash_negative_control_fails():
    report = crash_test(records=1000, kills=4, seed=3, cursor_filter=False)
    assert not report.passed
    assert report.duplicates


def test_durability_small():
    report = durability_test(kills=6, seed=2)
    assert report.passed, report.summary()
    assert report.commits > 0


def test_harness_cli_exit_codes():
    runner = CliRunner()
    res = runner.invoke(main, ["run", "s4_policy"])
    assert res.exit_code == 0
    assert '{scenario:"s4_policy",check:"student denied BioHall@energy",ok:true' in res.stdout
    res = runner.invoke(main, ["crash", "--records", "400", "--kills", "3", "--no-cursor-filter"])
    assert res.exit_code == 1
    assert runner.invoke(main, ["run", "s9"]).exit_code == 2
    res = runner.invoke(main, ["bench", "--rooms", "1", "--records", "20"])
    assert res.exit_code == 0 and res.stdout.startswith('{path:"context"')
