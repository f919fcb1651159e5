"""Crash-injection drivers.

``crash_test`` runs a device -> room -> building chain and repeatedly kills
the whole runtime, either at a batch boundary or in the middle of a pipelet
commit, then reopens it from disk. The building must end up with every device
record exactly once, in order, and a running count that saw each record once.

``durability_test`` SIGKILLs a writer process at random moments and checks
that a reopened branch is always a clean prefix of what was written.
"""

from __future__ import annotations

import os
import random
import signal
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from ctxrouter.record import TypedRecord, record
from ctxrouter.runtime import Runtime
from ctxrouter.store import FAULT_POINTS, FaultPlan, Lake, SimulatedCrash

CHAIN = [
    {
        "kind": "cot.dev/v1/counter",
        "name": "dev",
        "egress": [{"name": "seq", "flow": "cut seq,event_ts,ts", "policy": {"roles": ["*"]}}],
    },
    {
        "kind": "cot.dev/v1/room",
        "name": "room",
        "ingress": [{"name": "fwd", "sources": ["dev@seq"], "patch_from": True}],
        "egress": [{"name": "seq", "flow": "cut seq,from,event_ts,ts", "policy": {"roles": ["*"]}}],
    },
    {
        "kind": "cot.dev/v1/Building",
        "name": "building",
        "ingress": [
            {"name": "fwd", "sources": ["room@seq"], "patch_from": True},
            {"name": "tally", "sources": ["room@seq"], "flow_agg": "n:=count()"},
        ],
    },
]
LINEAGE = ("dev@seq", "room@seq")
BATCH = 100


@dataclass
class CrashReport:
    records: int
    kills: int
    seed: int
    cursor_filter: bool
    fired: list = field(default_factory=list)  # (kind, detail) per kill
    duplicates: dict = field(default_factory=dict)  # seq -> count > 1
    missing: list = field(default_factory=list)
    out_of_order: list = field(default_factory=list)
    bad_lineage: int = 0
    tally: Optional[int] = None
    tally_monotone: bool = True
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return (
            not self.duplicates
            and not self.missing
            and not self.out_of_order
            and self.bad_lineage == 0
            and self.tally == self.records
            and self.tally_monotone
        )

    def to_records(self) -> list[TypedRecord]:
        return [
            record(
                records=self.records,
                kills=len(self.fired),
                seed=self.seed,
                cursor_filter=self.cursor_filter,
                duplicates=len(self.duplicates),
                missing=len(self.missing),
                out_of_order=len(self.out_of_order),
                tally=self.tally,
                passed=self.passed,
            )
        ]

    def summary(self) -> str:
        mid = sum(1 for k, _ in self.fired if k == "commit")
        head = f"crash_test records={self.records} kills={len(self.fired)} (mid-commit {mid}) seed={self.seed}"
        if self.passed:
            return f"{head}: pass in {self.seconds:.1f}s"
        dup = sorted(self.duplicates)[:5]
        return (
            f"{head}: FAIL duplicates={len(self.duplicates)} e.g. {dup} missing={len(self.missing)} e.g. {self.missing[:5]} "
            f"out_of_order={len(self.out_of_order)} e.g. {self.out_of_order[:5]} tally={self.tally} lineage_errors={self.bad_lineage}"
        )


def _arm(rng: random.Random) -> tuple[FaultPlan, str]:
    """A plan that crashes the n-th pipelet write at a random persistence step."""
    point = rng.choice(FAULT_POINTS)
    remaining = [rng.randint(1, 12)]

    def decide(p, branch):
        # connector loads into the device and runtime bookkeeping are not pipelet writes
        if p != point or branch.label == "dev/main" or branch.label.startswith("_runtime/"):
            return False
        remaining[0] -= 1
        return remaining[0] == 0

    return FaultPlan(decide), point


def _open(root, cursor_filter: bool, faults=None) -> Runtime:
    return Runtime(root, fsync=False, background=False, cursor_filter=cursor_filter, faults=faults)


def crash_test(
    records: int = 10_000,
    kills: int = 25,
    seed: int = 7,
    cursor_filter: bool = True,
    data_dir: Optional[str] = None,
    timeout: float = 120.0,
) -> CrashReport:
    report = CrashReport(records, kills, seed, cursor_filter)
    rng = random.Random(seed)
    batches = [[record(seq=i) for i in range(s, min(s + BATCH, records))] for s in range(0, records, BATCH)]
    start = time.monotonic()
    with tempfile.TemporaryDirectory() as tmp:
        root = data_dir or tmp
        rt = _open(root, cursor_filter)
        rt.apply(CHAIN)
        rt.close()
        fed = 0
        while len(report.fired) < kills:
            mid_commit = rng.random() < 0.6
            plan, point = _arm(rng) if mid_commit else (None, "")
            rt = _open(root, cursor_filter, plan)
            steps = rng.randint(1, 8)
            try:
                for _ in range(steps if not mid_commit else 10_000):
                    if fed < len(batches) and rng.random() < 0.7:
                        rt.load("dev", batches[fed])
                        fed += 1
                    if not rt.step_all() and fed >= len(batches):
                        break
                report.fired.append(("boundary", f"after {steps} passes") if not mid_commit else ("boundary", "no write left"))
            except SimulatedCrash as exc:
                report.fired.append(("commit", str(exc)))
            finally:
                rt.close()
            if time.monotonic() - start > timeout:
                break
        rt = _open(root, cursor_filter)
        try:
            while fed < len(batches):
                rt.load("dev", batches[fed])
                fed += 1
            rt.quiesce(timeout)
            _verify(rt, report)
        finally:
            rt.close()
    report.seconds = time.monotonic() - start
    return report


def _verify(rt: Runtime, report: CrashReport):
    seqs = []
    tallies = []
    for rec in rt.context("building").main().records():
        if rec.get("seq") is not None:
            seqs.append(rec["seq"])
            if tuple(rec.get("from") or ()) != LINEAGE:
                report.bad_lineage += 1
        elif rec.get("n") is not None:
            tallies.append(rec["n"])
    counts = Counter(seqs)
    report.duplicates = {s: c for s, c in counts.items() if c > 1}
    report.missing = [i for i in range(report.records) if i not in counts]
    report.out_of_order = [(a, b) for a, b in zip(seqs, seqs[1:]) if b <= a][:100]
    report.tally = tallies[-1] if tallies else 0
    report.tally_monotone = all(a < b for a, b in zip(tallies, tallies[1:]))


# -- durability of the store itself ----------------------------------------------------------


@dataclass
class DurabilityReport:
    kills: int
    seed: int
    commits: int = 0
    torn: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.torn

    def summary(self) -> str:
        state = "pass" if self.passed else f"FAIL {self.torn[:5]}"
        return f"durability kills={self.kills} seed={self.seed} commits surviving={self.commits}: {state} in {self.seconds:.1f}s"

    def to_records(self) -> list[TypedRecord]:
        return [record(kills=self.kills, seed=self.seed, commits=self.commits, torn=len(self.torn), passed=self.passed)]


def _payload(cid: int) -> list[TypedRecord]:
    return [record(c=cid, j=j, pad="x" * (cid % 50)) for j in range(1 + cid % 7)]


def _writer(root: str, exit_point: Optional[str], after: int):
    """Child process body: append commits until killed."""
    lake = Lake(root, fsync=True)
    if exit_point is not None:
        left = [after]

        def decide(p, branch):
            if p == exit_point:
                left[0] -= 1
                if left[0] <= 0:
                    os._exit(0)  # die with no cleanup in the middle of a commit
            return False

        lake.faults = FaultPlan(decide)
    b = lake.branch("p", "main")
    while True:
        cid = b.next_id
        b.load(_payload(cid), {"c": str(cid)})


def check_prefix(root: str) -> tuple[int, list]:
    """Reopen and verify every surviving commit is complete and ids are dense."""
    problems = []
    try:
        b = Lake(root, fsync=False).branch("p", "main")
    except Exception as exc:  # a corrupt store is itself a failure
        return 0, [f"reopen failed: {exc}"]
    last = None
    for c in b.commits():
        if c.message.get("c") != str(c.id):
            problems.append(f"commit {c.id}: message {c.message}")
        got = [(r["c"], r["j"], r["pad"]) for r in c.records]
        want = [(r["c"], r["j"], r["pad"]) for r in _payload(c.id)]
        if got != want:
            problems.append(f"commit {c.id}: records differ")
        for r in c.records:
            if last is not None and r["ts"] <= last:
                problems.append(f"commit {c.id}: ts not increasing")
            last = r["ts"]
    journal = b.journal_path.read_bytes()
    if journal and not journal.endswith(b"\n"):
        problems.append("journal tail not truncated")
    return b.next_id, problems


def durability_test(kills: int = 50, seed: int = 0, data_dir: Optional[str] = None) -> DurabilityReport:
    if not hasattr(os, "fork"):
        raise RuntimeError("durability_test needs os.fork")
    report = DurabilityReport(kills, seed)
    rng = random.Random(seed)
    start = time.monotonic()
    with tempfile.TemporaryDirectory() as tmp:
        root = data_dir or tmp
        Lake(root, fsync=False).ensure_pool("p").ensure_branch("main")
        for k in range(kills):
            # half the kills land on an exact persistence step, half at a random instant
            exit_point = rng.choice(FAULT_POINTS) if k % 2 == 0 else None
            after = rng.randint(1, 5)
            delay = rng.uniform(0.0, 0.02)
            pid = os.fork()
            if pid == 0:
                try:
                    _writer(root, exit_point, after)
                finally:
                    os._exit(1)
            if exit_point is None:
                time.sleep(delay)
                os.kill(pid, signal.SIGKILL)
            else:
                # the child exits by itself at the chosen step; SIGKILL guards against a stall
                deadline = time.monotonic() + 5
                while time.monotonic() < deadline:
                    done, _ = os.waitpid(pid, os.WNOHANG)
                    if done:
                        pid = 0
                        break
                    time.sleep(0.001)
                if pid:
                    os.kill(pid, signal.SIGKILL)
            if pid:
                os.waitpid(pid, 0)
            commits, problems = check_prefix(root)
            report.commits = commits
            report.torn.extend(f"kill {k}: {p}" for p in problems)
    report.seconds = time.monotonic() - start
    return report
