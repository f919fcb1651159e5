"""Sync agents that move records along graph edges with exactly-once, in-order delivery.

A runner pulls source records whose ``ts`` is past its cursor, processes them,
and writes the output together with the new cursor (and any incremental
aggregate state) in a single commit to the target branch. After a restart the
cursor and state are read back from the target's commit messages, so records
are neither lost nor delivered twice. Source branches have strictly increasing
``ts``, which makes the ``ts > cursor`` filter exact.

Two runner types exist:

* :class:`ViewRunner` maintains an egress view: main -> view branch.
* :class:`IngressRunner` serves one ingress: every resolved source's view ->
  main, with per-source rule prefix and flow, then the combined flow_agg.
"""

from __future__ import annotations

import bisect
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from ctxrouter.cdg import Source
from ctxrouter.flow import EvalReport, Pipeline, eval_batch_incremental
from ctxrouter.record import Timestamp, TypedRecord
from ctxrouter.store import MAIN, Branch, Lake, StoreError

log = logging.getLogger(__name__)

MAX_COMMITS_PER_STEP = 64
MAX_RECORDS_PER_STEP = 20_000
POLL_INTERVAL = 0.1


def ingress_cursor_key(label: str, ingress: str) -> str:
    return f"cursor.{label}#{ingress}"


def view_cursor_key(ctx: str) -> str:
    return f"cursor.{ctx}@{MAIN}"


@dataclass
class RunnerStats:
    steps: int = 0
    commits: int = 0
    records_in: int = 0
    records_out: int = 0
    rejected: int = 0
    logged: int = 0
    restarts: int = 0
    errors: list = field(default_factory=list)


def _parse_cursor(text: Optional[str]) -> Optional[Timestamp]:
    return None if text is None else Timestamp.parse(text)


def _parse_state(text: Optional[str]):
    return None if text is None else json.loads(text)


def _dump_state(state) -> str:
    return json.dumps(state, separators=(",", ":"), sort_keys=True)


def pull(branch: Branch, cursor: Optional[Timestamp], start: int, cursor_filter: bool = True):
    """Read records after ``cursor`` from commit ``start`` on, within step limits.

    Returns (records, next commit index, max ts seen). Whole commits are taken
    so records sharing a ts are never split.
    """
    commits = branch.commits(start)[:MAX_COMMITS_PER_STEP]
    out: list[TypedRecord] = []
    nxt = start
    max_ts = cursor
    for c in commits:
        for r in c.records:
            ts = r.get("ts")
            if ts is None:
                continue
            if cursor_filter and cursor is not None and ts <= cursor:
                continue
            out.append(r)
            if max_ts is None or ts > max_ts:
                max_ts = ts
        nxt = c.id + 1
        if len(out) >= MAX_RECORDS_PER_STEP:
            break
    return out, nxt, max_ts


def first_commit_after(branch: Branch, cursor: Optional[Timestamp]) -> int:
    """Index of the first commit holding a record with ts > cursor (bisect on commit max ts)."""
    if cursor is None:
        return 0
    commits = branch.commits(0)
    keys = [c.max_ts.ns if c.max_ts is not None else -1 for c in commits]
    # branch ts are strictly increasing, so per-commit max ts is sorted
    return bisect.bisect_right(keys, cursor.ns)


def wrap_side_record(kind: str, label: str, source: str, rec: TypedRecord) -> TypedRecord:
    return TypedRecord([(f"_{kind}", label), ("_source", source), ("_record", rec)])


def patch_from(rec: TypedRecord, label: str) -> TypedRecord:
    cur = rec.get("from")
    if cur is None:
        lineage = (label,)
    elif isinstance(cur, tuple):
        lineage = cur + (label,)
    else:
        lineage = (cur, label)
    try:
        return rec.with_field("from", lineage)
    except Exception:
        # mixed-variant lineage (e.g. a numeric from); keep its text form
        return rec.with_field("from", (str(cur), label))


class _Runner:
    """Shared plumbing: locking, side-branch output, background thread."""

    def __init__(self, lake: Lake, pool: str, name: str, cursor_filter: bool = True):
        self.lake = lake
        self.pool = pool
        self.name = name
        self.cursor_filter = cursor_filter
        self.stats = RunnerStats()
        self._lock = threading.RLock()
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.stopped_reason: Optional[str] = None

    def _side_output(self, report: EvalReport, source: str):
        pool = self.lake.pool(self.pool)
        if report.rejects:
            recs = [wrap_side_record("reason", reason, source, r) for r, reason in report.rejects]
            pool.ensure_branch("errors").load(recs, {"runner": self.name})
            self.stats.rejected += len(recs)
        if report.logged:
            recs = [wrap_side_record("log", label, source, r) for label, r in report.logged]
            pool.ensure_branch("log").load(recs, {"runner": self.name})
            self.stats.logged += len(recs)

    # -- background execution ---------------------------------------------------------
    def start(self):
        if self._thread is not None and self._thread.is_alive():
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name=f"pipelet-{self.name}", daemon=True)
        self._thread.start()

    def stop(self, timeout: float = 5.0):
        self._stop.set()
        t = self._thread
        if t is not None and t is not threading.current_thread():
            t.join(timeout)
        self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def _loop(self):
        seen = self.lake.version
        while not self._stop.is_set():
            try:
                progressed = self.step()
            except StoreError as exc:
                log.error("pipelet %s stopped: %s", self.name, exc)
                self.stats.errors.append(str(exc))
                self.stopped_reason = str(exc)
                return
            except Exception as exc:  # keep the agent alive; report and back off
                log.exception("pipelet %s step failed", self.name)
                self.stats.errors.append(repr(exc))
                self._stop.wait(POLL_INTERVAL)
                continue
            if not progressed:
                seen = self.lake.wait_change(seen, POLL_INTERVAL)

    def step(self) -> bool:
        raise NotImplementedError

    def pending(self) -> bool:
        raise NotImplementedError


class ViewRunner(_Runner):
    """Keeps ``target_branch`` equal to the egress flow applied to main."""

    def __init__(self, lake: Lake, ctx: str, egress: str, flow: Pipeline, target_branch: str, cursor_filter: bool = True):
        super().__init__(lake, ctx, f"{ctx}@{egress}", cursor_filter)
        self.ctx = ctx
        self.egress = egress
        self.flow = flow
        self.target_branch = target_branch
        self.cursor_key = view_cursor_key(ctx)
        self.state_key = "state.view"
        self.recover()

    def _target(self) -> Branch:
        return self.lake.branch(self.ctx, self.target_branch)

    def _source(self) -> Branch:
        return self.lake.branch(self.ctx, MAIN)

    def recover(self):
        with self._lock:
            target = self._target()
            if self.cursor_filter:
                self.cursor = _parse_cursor(target.latest_cursor(self.cursor_key))
                self.state = _parse_state(target.latest_cursor(self.state_key))
            else:
                self.cursor, self.state = None, None
            self.next_commit = first_commit_after(self._source(), self.cursor) if self.cursor_filter else 0

    def pending(self) -> bool:
        last = self._source().last_ts
        return last is not None and (self.cursor is None or last > self.cursor)

    def step(self) -> bool:
        with self._lock:
            src = self._source()
            records, nxt, max_ts = pull(src, self.cursor, self.next_commit, self.cursor_filter)
            if nxt == self.next_commit:
                return False
            self.stats.steps += 1
            if not records:
                self.next_commit = nxt
                return True
            report = EvalReport()
            out, state = eval_batch_incremental(self.flow, records, self.state, report)
            self._side_output(report, f"{self.ctx}@{MAIN}")
            if out:
                message = {self.cursor_key: str(max_ts)}
                if state is not None:
                    message[self.state_key] = _dump_state(state)
                self._target().load(out, message, stamp="preserve")
                self.stats.commits += 1
            self.stats.records_in += len(records)
            self.stats.records_out += len(out)
            self.cursor, self.state, self.next_commit = max_ts, state, nxt
            return True


class _Edge:
    """Per-source position and flow state inside an ingress runner."""

    def __init__(self, source: Source):
        self.source = source
        self.label = source.label
        self.cursor: Optional[Timestamp] = None
        self.state = None
        self.next_commit = 0
        self.branch_name: Optional[str] = None


class IngressRunner(_Runner):
    def __init__(
        self,
        lake: Lake,
        ctx: str,
        spec,
        sources: Sequence[Source],
        view_branch: Callable[[str, str], Optional[str]],
        cursor_filter: bool = True,
    ):
        super().__init__(lake, ctx, f"{ctx}#{spec.name}", cursor_filter)
        self.ctx = ctx
        self.spec = spec
        self.view_branch = view_branch  # (context, egress) -> branch name or None
        self.agg_key = f"state.{spec.name}"
        self.edges: list[_Edge] = []
        self.agg_state = None
        self.configure(spec, sources, initial=True)

    @property
    def sources(self) -> tuple:
        return tuple(e.source for e in self.edges)

    def _target(self) -> Branch:
        return self.lake.branch(self.ctx, MAIN)

    def _edge_state_key(self, edge: _Edge) -> str:
        return f"state.{self.spec.name}.{edge.label}"

    def configure(self, spec, sources: Sequence[Source], initial: bool = False):
        """Swap in new sources or flows; edges re-read their position from the target."""
        with self._lock:
            self.spec = spec
            self.agg_key = f"state.{spec.name}"
            self.edges = [_Edge(s) for s in sources]
            if not initial:
                self.stats.restarts += 1
            self.recover()

    def recover(self):
        with self._lock:
            target = self._target()
            self.agg_state = _parse_state(target.latest_cursor(self.agg_key)) if self.cursor_filter else None
            for edge in self.edges:
                if self.cursor_filter:
                    edge.cursor = _parse_cursor(target.latest_cursor(ingress_cursor_key(edge.label, self.spec.name)))
                    edge.state = _parse_state(target.latest_cursor(self._edge_state_key(edge)))
                else:
                    edge.cursor, edge.state = None, None
                edge.branch_name = None
                edge.next_commit = 0

    def _edge_branch(self, edge: _Edge) -> Optional[Branch]:
        name = self.view_branch(edge.source.context, edge.source.egress)
        if name is None:
            return None
        if name != edge.branch_name:
            edge.branch_name = name
            b = self.lake.branch(edge.source.context, name)
            edge.next_commit = first_commit_after(b, edge.cursor) if self.cursor_filter else 0
            return b
        return self.lake.branch(edge.source.context, name)

    def pending(self) -> bool:
        for edge in self.edges:
            b = self._edge_branch(edge)
            if b is None:
                continue
            if b.last_ts is not None and (edge.cursor is None or b.last_ts > edge.cursor):
                return True
        return False

    def step(self) -> bool:
        with self._lock:
            contributions = []
            moved = False
            for edge in self.edges:
                branch = self._edge_branch(edge)
                if branch is None:
                    continue
                records, nxt, max_ts = pull(branch, edge.cursor, edge.next_commit, self.cursor_filter)
                if nxt == edge.next_commit:
                    continue
                moved = True
                if not records:
                    edge.next_commit = nxt
                    continue
                report = EvalReport()
                shaped = edge.source.injection.apply(records, report)
                out, state = eval_batch_incremental(self.spec.flow, shaped, edge.state, report)
                if self.spec.patch_from:
                    out = [patch_from(r, edge.label) for r in out]
                contributions.append((edge, records, out, state, max_ts, nxt, report))
            if not moved:
                return False
            self.stats.steps += 1
            if not contributions:
                return True

            merged = [r for c in contributions for r in c[2]]
            agg_report = EvalReport()
            final, agg_state = eval_batch_incremental(self.spec.flow_agg, merged, self.agg_state, agg_report)
            for edge, _, _, _, _, _, report in contributions:
                self._side_output(report, edge.label)
            self._side_output(agg_report, f"{self.ctx}#{self.spec.name}")

            positions = {id(e): (e.cursor, e.state) for e in self.edges}
            for edge, _, _, state, max_ts, _, _ in contributions:
                positions[id(edge)] = (max_ts, state)
            if final:
                # every edge's position goes in, not just the contributors': a batch that
                # emitted nothing may still have changed the shared flow_agg state
                message = {}
                for edge in self.edges:
                    cursor, state = positions[id(edge)]
                    if cursor is not None:
                        message[ingress_cursor_key(edge.label, self.spec.name)] = str(cursor)
                    if state is not None:
                        message[self._edge_state_key(edge)] = _dump_state(state)
                if agg_state is not None:
                    message[self.agg_key] = _dump_state(agg_state)
                self._target().load(final, message, stamp="stamp")
                self.stats.commits += 1
            for edge, records, _, state, max_ts, nxt, _ in contributions:
                edge.cursor, edge.state, edge.next_commit = max_ts, state, nxt
                self.stats.records_in += len(records)
            self.agg_state = agg_state
            self.stats.records_out += len(final)
            return True
