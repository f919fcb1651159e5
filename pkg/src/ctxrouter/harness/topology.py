"""Campus topology used by the scenarios: devices -> rooms -> building.

Occupancy is derived over fixed 60 s windows of virtual time: a room is
occupied (1.0) in a window iff any of its motion records in that window has
``detected=true``. Building occupancy for a window is the mean over rooms,
i.e. occupied rooms / rooms. Energy is summed per window.

Rooms re-emit a window's value each time new records for it arrive, so a
room's view can hold several versions of one window. Versions only grow
(max of booleans, sum of non-negative power), which is why building queries
take ``max`` per (room, window) to pick the latest one.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional

from ctxrouter.record import Timestamp, TypedRecord, record
from ctxrouter.runtime import GeneratorConnector, Runtime

WINDOW_S = 60
EPOCH = Timestamp.parse("2024-01-01T00:00:00Z")

MOTION_KIND = "cot.dev/v1/motion"
APPLIANCE_KIND = "cot.dev/v1/appliance"
ROOM_KIND = "cot.dev/v1/room"
BUILDING_KIND = "cot.dev/v1/Building"
PHONE_KIND = "cot.dev/v1/phone"
LAPTOP_KIND = "cot.dev/v1/laptop"

OPEN = {"mode": "allow", "roles": ["*"]}
ENERGY_ROLES = {"mode": "allow", "roles": ["staff", "building", "facilities", "automation"]}

# building-level answers, one record per window
BUILDING_OCCUPANCY_QUERY = "occ:=max(occupancy) by from,window | occupancy:=avg(occ) by window | sort window"
BUILDING_ENERGY_QUERY = "e:=max(energy) by from,window | energy:=sum(e) by window | sort window"


def motion_doc(name: str) -> dict:
    return {
        "kind": MOTION_KIND,
        "name": name,
        "role": "device",
        "egress": [{"name": "detected", "flow": "cut detected,window,event_ts,ts", "policy": OPEN}],
    }


def appliance_doc(name: str) -> dict:
    return {
        "kind": APPLIANCE_KIND,
        "name": name,
        "role": "device",
        "egress": [{"name": "power", "flow": "cut power,window,event_ts,ts", "policy": OPEN}],
    }


def room_doc(name: str) -> dict:
    return {
        "kind": ROOM_KIND,
        "name": name,
        "role": "room",
        "ingress": [
            {
                "name": "motion",
                "intent": ["*/*/motion@detected"],
                "flow": "shape(this,<{detected:float64}>)",
                "flow_agg": "occupancy:=max(detected) by window",
            },
            {"name": "appliances", "intent": ["*/*/appliance@power"], "flow_agg": "energy:=sum(power) by window"},
            # tenants' devices report measurements taken on any AP; keep the ones taken here
            {
                "name": "netTest",
                "intent": ["*/*/phone@netTest", "*/*/laptop@netTest"],
                "flow": f"where ap == {json.dumps(name)}",
            },
        ],
        "egress": [
            {"name": "occupancy", "flow": "where has(occupancy) | cut occupancy,window,event_ts,ts", "policy": OPEN},
            {"name": "energy", "flow": "where has(energy) | cut energy,window,event_ts,ts", "policy": ENERGY_ROLES},
            {"name": "netSpeed", "flow": "where has(download) | cut download,upload,event_ts,ts", "policy": OPEN},
        ],
    }


def tenant_doc(name: str, kind: str = PHONE_KIND) -> dict:
    """A tenant's phone or laptop; each record is one network test tagged with its AP."""
    return {
        "kind": kind,
        "name": name,
        "role": "tenant",
        "egress": [{"name": "netTest", "flow": "cut download,upload,ap,event_ts,ts", "policy": OPEN}],
    }


def building_doc(name: str) -> dict:
    return {
        "kind": BUILDING_KIND,
        "name": name,
        "role": "building",
        "ingress": [
            {"name": "room_occupancy", "intent": ["cot.dev/*/room@occupancy"], "patch_from": True},
            {"name": "room_energy", "intent": ["cot.dev/*/room@energy"], "patch_from": True},
        ],
        "egress": [
            {
                "name": "occupancy",
                "flow": "where has(occupancy) | cut occupancy,window,from,event_ts,ts",
                "policy": OPEN,
            },
            {"name": "energy", "flow": "where has(energy) | cut energy,window,from,event_ts,ts", "policy": ENERGY_ROLES},
        ],
    }


def infra_acl() -> dict:
    """ACL entries for the infrastructure roles the campus needs once an ACL is active."""
    return {
        "room": ["*@detected", "*@power", "*@netTest"],
        "building": ["*@occupancy", "*@energy"],
        "automation": ["*@occupancy", "*@energy"],
    }


def motion_template(p_detect: float):
    def make(i: int, t: float, rng: random.Random) -> TypedRecord:
        return record(detected=rng.random() < p_detect, window=int(t // WINDOW_S))

    return make


def power_template(base: float):
    def make(i: int, t: float, rng: random.Random) -> TypedRecord:
        return record(power=round(base + rng.uniform(0.0, base / 2), 3), window=int(t // WINDOW_S))

    return make


@dataclass
class Campus:
    rt: Runtime
    building: str
    rooms: list[str]
    motion: dict = field(default_factory=dict)  # room -> motion device
    appliance: dict = field(default_factory=dict)  # room -> appliance device

    def devices(self) -> list[str]:
        return list(self.motion.values()) + list(self.appliance.values())

    def feed(self, records_per_device: int, seed: int, period_s: float = 5.0, batch: int = 50, p_detect: Optional[dict] = None):
        """Generate motion and power data for every device (deterministic per seed)."""
        for k, room in enumerate(self.rooms):
            p = (p_detect or {}).get(room, 0.02 + 0.05 * (k % 4))
            duration = records_per_device * period_s
            rate = 1.0 / period_s
            GeneratorConnector(
                self.rt, self.motion[room], motion_template(p), rate, duration, seed=seed * 1000 + 2 * k, epoch=EPOCH, batch=batch
            ).run()
            GeneratorConnector(
                self.rt, self.appliance[room], power_template(50.0 + 25 * k), rate, duration, seed=seed * 1000 + 2 * k + 1, epoch=EPOCH, batch=batch
            ).run()


def build_campus(
    rt: Runtime, rooms: int = 4, building: str = "BioHall", join: bool = True, names: Optional[list[str]] = None
) -> Campus:
    names = list(names or [f"Room{i + 1}" for i in range(rooms)])
    campus = Campus(rt, building, names)
    docs = [building_doc(building)]
    for room in names:
        campus.motion[room] = f"{room}-motion"
        campus.appliance[room] = f"{room}-plug"
        docs += [room_doc(room), motion_doc(campus.motion[room]), appliance_doc(campus.appliance[room])]
    results = rt.apply(docs)
    bad = [r for r in results if r.status == "error"]
    if bad:
        raise ValueError(f"topology rejected: {bad}")
    if join:
        for room in names:
            rt.join(campus.motion[room], room)
            rt.join(campus.appliance[room], room)
            rt.join(room, building)
    return campus
