"""Query over context data vs. query over raw device data.

The context path asks the building's egress views. The device path scans every
raw device record and computes the same answers in plain Python, so it doubles
as the correctness oracle for the context path.
"""

from __future__ import annotations

import tempfile
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from ctxrouter.flow import EvalReport
from ctxrouter.harness.topology import BUILDING_ENERGY_QUERY, BUILDING_OCCUPANCY_QUERY, Campus, build_campus
from ctxrouter.record import TypedRecord, record
from ctxrouter.runtime import Runtime

TOLERANCE = 1e-9


@dataclass
class PathResult:
    occupancy: dict  # window -> value
    energy: dict
    scanned: int
    seconds: float


@dataclass
class BenchReport:
    rooms: int
    records_per_device: int
    context: PathResult
    device: PathResult
    mismatches: list = field(default_factory=list)

    @property
    def equal(self) -> bool:
        return not self.mismatches

    @property
    def passed(self) -> bool:
        return self.equal and (self.context.scanned < self.device.scanned or self.device.scanned == 0)

    def to_records(self) -> list[TypedRecord]:
        return [
            record(path=name, scanned=p.scanned, seconds=p.seconds, windows=len(p.occupancy))
            for name, p in (("context", self.context), ("device", self.device))
        ] + [record(mismatch=m) for m in self.mismatches]

    def summary(self) -> str:
        ratio = self.device.scanned / self.context.scanned if self.context.scanned else float("inf")
        return (
            f"{self.rooms} rooms x {self.records_per_device} records/device: "
            f"context scanned {self.context.scanned} in {self.context.seconds * 1e3:.1f} ms, "
            f"device scanned {self.device.scanned} in {self.device.seconds * 1e3:.1f} ms "
            f"(scan ratio {ratio:.1f}x), answers {'equal' if self.equal else 'DIFFER'}"
        )


def context_path(campus: Campus, role: str = "staff") -> PathResult:
    rt = campus.rt
    start = time.perf_counter()
    occ = rt.query(f"{campus.building}@occupancy", BUILDING_OCCUPANCY_QUERY, role=role)
    energy = rt.query(f"{campus.building}@energy", BUILDING_ENERGY_QUERY, role=role)
    elapsed = time.perf_counter() - start
    return PathResult(
        {r["window"]: r["occupancy"] for r in occ.records},
        {r["window"]: r["energy"] for r in energy.records},
        occ.scanned + energy.scanned,
        elapsed,
    )


def device_path(campus: Campus) -> PathResult:
    """Brute force over every raw device record, independent of the dataflow engine."""
    rt = campus.rt
    start = time.perf_counter()
    scanned = 0
    per_room: dict = defaultdict(dict)  # window -> {room: occupied}
    energy: dict = defaultdict(float)
    for room in campus.rooms:
        for rec in rt.context(campus.motion[room]).main().records():
            scanned += 1
            w = rec["window"]
            per_room[w][room] = per_room[w].get(room, 0.0) or (1.0 if rec["detected"] else 0.0)
        for rec in rt.context(campus.appliance[room]).main().records():
            scanned += 1
            energy[rec["window"]] += rec["power"]
    occupancy = {w: sum(v.values()) / len(v) for w, v in per_room.items()}
    return PathResult(occupancy, dict(energy), scanned, time.perf_counter() - start)


def compare(context: dict, device: dict, what: str, tol: float = TOLERANCE) -> list[str]:
    out = []
    if set(context) != set(device):
        out.append(f"{what}: windows differ: context-only {sorted(set(context) - set(device))}, device-only {sorted(set(device) - set(context))}")
    for w in sorted(set(context) & set(device)):
        if abs(context[w] - device[w]) > tol:
            out.append(f"{what}[{w}]: context {context[w]!r} != device {device[w]!r}")
    return out


def bench_query_orientation(rooms: int = 4, records_per_device: int = 1000, seed: int = 0, data_dir: Optional[str] = None) -> BenchReport:
    with tempfile.TemporaryDirectory() as tmp:
        with Runtime(data_dir or tmp, fsync=False, background=False) as rt:
            campus = build_campus(rt, rooms)
            if records_per_device:
                campus.feed(records_per_device, seed)
            if not rt.quiesce(120):
                raise RuntimeError("pipelets did not quiesce")
            ctx = context_path(campus)
            dev = device_path(campus)
    mismatches = compare(ctx.occupancy, dev.occupancy, "occupancy") + compare(ctx.energy, dev.energy, "energy")
    return BenchReport(rooms, records_per_device, ctx, dev, mismatches)
