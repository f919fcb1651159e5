"""Append-only, branch-structured commit journal on the local filesystem.

Layout::

    <root>/<pool>/<branch>/000000000007.rec   record-lines of commit 7
    <root>/<pool>/<branch>/000000000007.msg   key=value message lines
    <root>/<pool>/<branch>/journal           one durable commit id per line

A commit becomes durable when its id line is appended to the journal, which
happens after the record and message files are in place. Reopening a branch
drops a torn (newline-less) journal tail and ignores files with no journal
entry, so a crash at any point leaves a prefix of the committed history.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from ctxrouter.flow import EvalReport, Pipeline, eval_pipeline
from ctxrouter.record import (
    RecordError,
    Timestamp,
    TypedRecord,
    parse_lines,
    serialize_lines,
)

log = logging.getLogger(__name__)

MAIN = "main"
_NAME_OK = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-.")


class StoreError(Exception):
    pass


class UnknownPool(StoreError):
    pass


class UnknownBranch(StoreError):
    pass


class EmptyCommit(StoreError):
    pass


class CorruptStore(StoreError):
    pass


class SimulatedCrash(BaseException):
    """Raised by a FaultPlan to emulate the process dying at a persistence step.

    Derives from BaseException so ordinary ``except Exception`` handlers in
    the data path do not swallow it.
    """


# Points inside Branch.load where a FaultPlan may fire, in execution order.
FAULT_POINTS = ("before_records", "after_records", "after_message", "torn_journal", "after_journal")


class FaultPlan:
    """Fires SimulatedCrash at chosen persistence steps.

    ``decide(point, branch)`` returns True when the crash should happen. The
    default plan crashes on the ``countdown``-th visit to any point in
    ``points``.
    """

    def __init__(self, decide: Callable[[str, "Branch"], bool]):
        self._decide = decide
        self.fired: list[tuple[str, str]] = []

    @classmethod
    def countdown(cls, n: int, points: Iterable[str] = FAULT_POINTS) -> "FaultPlan":
        allowed = set(points)
        remaining = [n]

        def decide(point, branch):
            if point not in allowed:
                return False
            remaining[0] -= 1
            return remaining[0] == 0

        return cls(decide)

    def check(self, point: str, branch: "Branch"):
        if self._decide(point, branch):
            self.fired.append((point, branch.label))
            raise SimulatedCrash(f"{point} on {branch.label}")


@dataclass(frozen=True)
class Commit:
    id: int
    records: tuple
    message: dict = field(default_factory=dict)

    @property
    def max_ts(self) -> Optional[Timestamp]:
        best = None
        for r in self.records:
            ts = r.get("ts")
            if ts is not None and (best is None or ts > best):
                best = ts
        return best


# -- message sidecar -------------------------------------------------------------

def _escape(text: str, key: bool) -> str:
    text = text.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")
    return text.replace("=", "\\e") if key else text


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "r": "\r", "e": "=", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def encode_message(message: dict) -> str:
    return "".join(f"{_escape(k, True)}={_escape(v, False)}\n" for k, v in message.items())


def decode_message(text: str) -> dict:
    out = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptStore(f"bad message line {line!r}")
        out[_unescape(key)] = _unescape(value)
    return out


# Commit files never change once journaled, so parsed content can be reused
# across reopen within one process. Keyed by path plus (size, mtime).
_PARSE_CACHE: dict[str, tuple[tuple, tuple]] = {}
_PARSE_CACHE_LIMIT = 200_000


def _read_records(path: Path) -> tuple:
    st = path.stat()
    stamp = (st.st_size, st.st_mtime_ns, st.st_ino)
    hit = _PARSE_CACHE.get(str(path))
    if hit is not None and hit[0] == stamp:
        return hit[1]
    records = tuple(parse_lines(path.read_text(encoding="utf-8")))
    if len(_PARSE_CACHE) >= _PARSE_CACHE_LIMIT:
        _PARSE_CACHE.clear()
    _PARSE_CACHE[str(path)] = (stamp, records)
    return records


def _write_atomic(path: Path, data: str, fsync: bool):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(data)
        if fsync:
            f.flush()
            os.fsync(f.fileno())
    os.replace(tmp, path)


def _check_name(kind: str, name: str):
    if not name or not set(name) <= _NAME_OK or name.startswith(".") or ".." in name:
        raise StoreError(f"invalid {kind} name {name!r}")


# -- timestamp stamping ----------------------------------------------------------

def now_ns() -> int:
    return time.time_ns()


def stamp_records(records, last: Optional[Timestamp], clock: Callable[[], int] = now_ns):
    """Assign load-time ``ts`` and default ``event_ts``.

    ts is strictly increasing within a branch: if the clock has not moved past
    the previous ts it is bumped by one nanosecond. A record keeps an existing
    non-null event_ts; otherwise event_ts is set to its ts.
    """
    out = []
    now = clock()
    prev = last.ns if last is not None else None
    for rec in records:
        ns = now if prev is None or now > prev else prev + 1
        prev = ns
        ts = Timestamp(ns)
        if rec.get("event_ts") is None:
            rec = rec.with_field("event_ts", ts, before="ts")
        out.append(rec.with_field("ts", ts))
    return out


def preserve_records(records, last: Optional[Timestamp], clock: Callable[[], int] = now_ns):
    """Keep each record's ts when it advances the branch; stamp it otherwise."""
    out = []
    prev = last.ns if last is not None else None
    now = None
    for rec in records:
        ts = rec.get("ts")
        if ts is not None and (prev is None or ts.ns > prev):
            prev = ts.ns
            out.append(rec)
            continue
        if now is None:
            now = clock()
        ns = now if prev is None or now > prev else prev + 1
        prev = ns
        out.append(rec.with_field("ts", Timestamp(ns)))
    return out


STAMP_MODES = {"stamp": stamp_records, "preserve": preserve_records, None: None}


# -- branches and pools -------------------------------------------------------------

class Branch:
    def __init__(self, pool: "Pool", name: str, path: Path):
        self.pool = pool
        self.name = name
        self.path = path
        self._commits: list[Commit] = []
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self.last_ts: Optional[Timestamp] = None
        self._open()

    @property
    def label(self) -> str:
        return f"{self.pool.name}/{self.name}"

    @property
    def journal_path(self) -> Path:
        return self.path / "journal"

    def _open(self):
        self.path.mkdir(parents=True, exist_ok=True)
        jp = self.journal_path
        if not jp.exists():
            jp.touch()
            return
        raw = jp.read_bytes()
        if raw and not raw.endswith(b"\n"):
            keep = raw.rfind(b"\n") + 1
            log.warning("branch %s: dropping torn journal tail %r", self.label, raw[keep:])
            with open(jp, "r+b") as f:
                f.truncate(keep)
            raw = raw[:keep]
        ids = [int(x) for x in raw.decode().split()]
        if ids != list(range(len(ids))):
            raise CorruptStore(f"branch {self.label}: journal ids not dense: {ids[:10]}...")
        for cid in ids:
            rec_path = self.path / f"{cid:012d}.rec"
            msg_path = self.path / f"{cid:012d}.msg"
            try:
                records = _read_records(rec_path)
                message = decode_message(msg_path.read_text(encoding="utf-8"))
            except (OSError, RecordError) as exc:
                raise CorruptStore(f"branch {self.label}: journaled commit {cid} unreadable: {exc}") from exc
            self._append_commit(Commit(cid, records, message))

    def _append_commit(self, commit: Commit):
        self._commits.append(commit)
        ts = commit.max_ts
        if ts is not None and (self.last_ts is None or ts > self.last_ts):
            self.last_ts = ts

    @property
    def next_id(self) -> int:
        return len(self._commits)

    def load(
        self,
        records: Iterable[TypedRecord],
        message: Optional[dict] = None,
        stamp: Optional[str] = "stamp",
        clock: Callable[[], int] = now_ns,
    ) -> int:
        records = list(records)
        if not records:
            raise EmptyCommit(f"empty-commit: refusing empty commit to {self.label}")
        message = dict(message or {})
        for k, v in message.items():
            if not isinstance(k, str) or not isinstance(v, str) or not k:
                raise StoreError(f"commit message must map non-empty strings to strings: {k!r}")
        lake = self.pool.lake
        fsync = lake.fsync
        faults = lake.faults
        with self._lock:
            if stamp is not None:
                records = STAMP_MODES[stamp](records, self.last_ts, clock)
            cid = len(self._commits)
            name = f"{cid:012d}"
            if faults:
                faults.check("before_records", self)
            _write_atomic(self.path / f"{name}.rec", serialize_lines(records), fsync)
            if faults:
                faults.check("after_records", self)
            _write_atomic(self.path / f"{name}.msg", encode_message(message), fsync)
            if faults:
                faults.check("after_message", self)
            line = f"{cid}\n"
            with open(self.journal_path, "a", encoding="ascii") as f:
                if faults:
                    try:
                        faults.check("torn_journal", self)
                    except SimulatedCrash:
                        f.write(line[: max(1, len(line) // 2)])
                        raise
                f.write(line)
                if fsync:
                    f.flush()
                    os.fsync(f.fileno())
            self._append_commit(Commit(cid, tuple(records), message))
            self._cond.notify_all()
        lake._notify()
        if faults:
            faults.check("after_journal", self)
        return cid

    def commits(self, from_id: int = 0) -> list[Commit]:
        with self._lock:
            return self._commits[from_id:]

    def commit(self, cid: int) -> Commit:
        return self._commits[cid]

    def records(self) -> list[TypedRecord]:
        out = []
        for c in self.commits():
            out.extend(c.records)
        return out

    def wait_for(self, next_id: int, timeout: Optional[float]) -> bool:
        """Block until a commit with id >= next_id exists. Returns False on timeout."""
        with self._cond:
            return self._cond.wait_for(lambda: len(self._commits) > next_id, timeout)

    def latest_cursor(self, key: str) -> Optional[str]:
        with self._lock:
            for c in reversed(self._commits):
                if key in c.message:
                    return c.message[key]
        return None


class Pool:
    def __init__(self, lake: "Lake", name: str, path: Path):
        self.lake = lake
        self.name = name
        self.path = path
        self.branches: dict[str, Branch] = {}
        self._lock = threading.Lock()
        path.mkdir(parents=True, exist_ok=True)
        for child in sorted(path.iterdir()):
            if child.is_dir():
                self.branches[child.name] = Branch(self, child.name, child)
        if MAIN not in self.branches:
            self.create_branch(MAIN)

    def create_branch(self, name: str) -> Branch:
        _check_name("branch", name)
        with self._lock:
            if name in self.branches:
                raise StoreError(f"branch {self.name}/{name} exists")
            b = Branch(self, name, self.path / name)
            self.branches[name] = b
            return b

    def ensure_branch(self, name: str) -> Branch:
        b = self.branches.get(name)
        if b is not None:
            return b
        with self._lock:
            b = self.branches.get(name)
            if b is None:
                _check_name("branch", name)
                b = Branch(self, name, self.path / name)
                self.branches[name] = b
            return b

    def branch(self, name: str) -> Branch:
        try:
            return self.branches[name]
        except KeyError:
            raise UnknownBranch(f"unknown branch {self.name}/{name}") from None


class Lake:
    """All pools under one root directory."""

    def __init__(self, root: str | os.PathLike, fsync: bool = True, faults: Optional[FaultPlan] = None):
        self.root = Path(root)
        self.fsync = fsync
        self.faults = faults
        self.pools: dict[str, Pool] = {}
        self._lock = threading.Lock()
        self._change = threading.Condition()
        self.version = 0
        self.root.mkdir(parents=True, exist_ok=True)
        for child in sorted(self.root.iterdir()):
            if child.is_dir():
                self.pools[child.name] = Pool(self, child.name, child)

    # -- change notification ------------------------------------------------------
    def _notify(self):
        with self._change:
            self.version += 1
            self._change.notify_all()

    def wait_change(self, seen_version: int, timeout: float) -> int:
        with self._change:
            self._change.wait_for(lambda: self.version != seen_version, timeout)
            return self.version

    # -- pools ---------------------------------------------------------------------
    def create_pool(self, name: str) -> Pool:
        _check_name("pool", name)
        with self._lock:
            if name in self.pools:
                raise StoreError(f"pool {name} exists")
            pool = Pool(self, name, self.root / name)
            self.pools[name] = pool
            return pool

    def ensure_pool(self, name: str) -> Pool:
        with self._lock:
            pool = self.pools.get(name)
            if pool is None:
                _check_name("pool", name)
                pool = Pool(self, name, self.root / name)
                self.pools[name] = pool
            return pool

    def pool(self, name: str) -> Pool:
        try:
            return self.pools[name]
        except KeyError:
            raise UnknownPool(f"unknown pool {name}") from None

    def branch(self, pool: str, branch: str) -> Branch:
        return self.pool(pool).branch(branch)

    # -- data operations --------------------------------------------------------------
    def load(self, pool: str, branch: str, records, message: Optional[dict] = None, stamp: Optional[str] = "stamp") -> int:
        return self.branch(pool, branch).load(records, message, stamp)

    def query(self, pool: str, branch: str, pipeline: Pipeline, report: Optional[EvalReport] = None) -> list[TypedRecord]:
        return eval_pipeline(pipeline, self.branch(pool, branch).records(), report)

    def watch(
        self,
        pool: str,
        branch: str,
        from_commit: int = 0,
        stop: Optional[threading.Event] = None,
        poll: float = 0.1,
    ) -> Iterator[tuple[int, tuple]]:
        """Yield (commit id, records) for every commit >= from_commit, then wait for more.

        Runs until ``stop`` is set (checked every ``poll`` seconds while idle).
        """
        b = self.branch(pool, branch)
        if from_commit < 0 or from_commit > b.next_id:
            raise StoreError(f"watch start {from_commit} beyond next commit id {b.next_id}")
        nxt = from_commit
        while stop is None or not stop.is_set():
            for c in b.commits(nxt):
                yield c.id, c.records
                nxt = c.id + 1
            b.wait_for(nxt, poll)

    def read_messages(self, pool: str, branch: str) -> list[tuple[int, dict]]:
        return [(c.id, dict(c.message)) for c in self.branch(pool, branch).commits()]

    def latest_cursor(self, pool: str, branch: str, key: str) -> Optional[str]:
        return self.branch(pool, branch).latest_cursor(key)
