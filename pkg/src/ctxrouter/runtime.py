"""Single-process runtime: context registry, serialized composition loop, queries.

All control-state changes (apply, join, leave, ACL updates) run one at a time
on a dedicated worker thread in submission order. Data-plane work happens in
pipelet runners, one per egress view and one per ingress, which coordinate
only through store commits.

Runtime state lives in the ``_runtime`` pool next to the context pools:

* ``configs``: one record per applied context document (last one wins);
* ``associations``: join/leave events;
* ``acl``: ACL table snapshots.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Union

from ctxrouter.cdg import (
    Composer,
    CompositionError,
    Delta,
    RuleError,
    UnknownContext,
    parse_intent,
)
from ctxrouter.config import AclDoc, ConfigError, ContextDoc, load_documents, parse_document
from ctxrouter.context import AccessDenied, ContextState, UnknownEgress
from ctxrouter.flow import EvalReport, Pipeline, eval_batch_incremental, eval_pipeline, parse_pipeline
from ctxrouter.pipelet import IngressRunner, ViewRunner
from ctxrouter.policy import AclTable, PolicyError, authorize
from ctxrouter.record import Timestamp, TypedRecord
from ctxrouter.store import FaultPlan, Lake

log = logging.getLogger(__name__)

RUNTIME_POOL = "_runtime"
FANOUT_FIELD = "_ctx"
DEFAULT_ROLE = "anonymous"


class BadRequest(Exception):
    status = 400


@dataclass
class ApplyResult:
    name: str
    status: str  # created | updated | unchanged | acl | error
    error: Optional[str] = None


@dataclass
class QueryResult:
    records: list
    scanned: int
    contexts: list = field(default_factory=list)


@dataclass(frozen=True)
class Target:
    selector: str  # direct | kind | any
    value: str
    egress: str

    def __str__(self) -> str:
        if self.selector == "direct":
            return f"{self.value}@{self.egress}"
        if self.selector == "any":
            return f"any@{self.egress}"
        return f"kind:{self.value}@{self.egress}"


def parse_target(text: str) -> Target:
    try:
        intent = parse_intent(text)
    except RuleError as exc:
        raise BadRequest(str(exc)) from None
    return Target(intent.selector, intent.value, intent.egress)


def _doc_text(doc: ContextDoc) -> str:
    return json.dumps(doc.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


class Runtime:
    def __init__(
        self,
        data_dir,
        *,
        fsync: bool = True,
        background: bool = True,
        cursor_filter: bool = True,
        faults: Optional[FaultPlan] = None,
        clock: Optional[Callable[[], int]] = None,
    ):
        self.lake = Lake(data_dir, fsync=fsync, faults=faults)
        self.background = background
        self.cursor_filter = cursor_filter
        self.contexts: dict[str, ContextState] = {}
        self.acl: Optional[AclTable] = None
        self.views: dict[tuple[str, str], ViewRunner] = {}
        self.ingress: dict[tuple[str, str], IngressRunner] = {}
        self.access_log: deque = deque(maxlen=10_000)
        self._doc_texts: dict[str, str] = {}
        self._loop = ThreadPoolExecutor(max_workers=1, thread_name_prefix="composer")
        self._closed = False
        meta = self.lake.ensure_pool(RUNTIME_POOL)
        for b in ("configs", "associations", "acl"):
            meta.ensure_branch(b)
        self.composer = Composer(self.contexts, acl=lambda: self.acl, clock=clock, persist=self._persist_association)
        self._serial(self._restore)

    # -- serialization ---------------------------------------------------------------
    def _serial(self, fn, *args):
        if self._closed:
            raise RuntimeError("runtime is closed")
        return self._loop.submit(fn, *args).result()

    def close(self):
        if self._closed:
            return
        for r in self._runners():
            r.stop()
        self._loop.shutdown(wait=True)
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _runners(self) -> list:
        return list(self.views.values()) + list(self.ingress.values())

    # -- persistence -------------------------------------------------------------------
    def _meta(self, branch: str):
        return self.lake.branch(RUNTIME_POOL, branch)

    def _persist_association(self, rec: TypedRecord):
        self._meta("associations").load([rec], {}, stamp="stamp")

    def _persist_config(self, ctx: ContextState):
        rec = TypedRecord(
            [("name", ctx.name), ("doc", _doc_text(ctx.doc)), ("views", json.dumps(ctx.view_branches, sort_keys=True))]
        )
        self._meta("configs").load([rec], {}, stamp="stamp")

    def _restore(self):
        acl_recs = self._meta("acl").records()
        if acl_recs:
            text = acl_recs[-1]["acl"]
            self.acl = None if text is None else AclTable.from_dict(json.loads(text))
        latest: dict[str, TypedRecord] = {}
        for rec in self._meta("configs").records():
            latest[rec["name"]] = rec
        for name, rec in latest.items():
            if rec["doc"] is None:
                continue
            doc = ContextDoc.model_validate(json.loads(rec["doc"]))
            ctx = ContextState(doc, json.loads(rec["views"])).attach(self.lake)
            self.contexts[name] = ctx
            self._doc_texts[name] = _doc_text(doc)
            self.composer.register(ctx)
        self.composer.restore(
            r for r in self._meta("associations").records() if r["child"] in self.contexts and r["parent"] in self.contexts
        )
        self.composer.sources = self.composer.resolve_all()
        for ctx in self.contexts.values():
            self._start_views(ctx)
            self._start_ingresses(ctx)

    # -- runner management ---------------------------------------------------------------
    def _view_branch_of(self, ctx: str, egress: str) -> Optional[str]:
        c = self.contexts.get(ctx)
        return None if c is None else c.view_branches.get(egress)

    def _launch(self, runner):
        if self.background:
            runner.start()
        return runner

    def _start_views(self, ctx: ContextState):
        for e in ctx.egresses:
            key = (ctx.name, e.name)
            if key not in self.views:
                r = ViewRunner(self.lake, ctx.name, e.name, e.flow, ctx.view_branches[e.name], self.cursor_filter)
                self.views[key] = self._launch(r)

    def _start_ingresses(self, ctx: ContextState):
        for spec in ctx.ingresses:
            key = (ctx.name, spec.name)
            if key not in self.ingress:
                srcs = self.composer.sources.get(key, ())
                r = IngressRunner(self.lake, ctx.name, spec, srcs, self._view_branch_of, self.cursor_filter)
                self.ingress[key] = self._launch(r)

    def _apply_changes(self, changes: dict):
        for key, (old, new) in changes.items():
            runner = self.ingress.get(key)
            if runner is None:
                continue
            runner.configure(runner.spec, new)

    # -- configuration -------------------------------------------------------------------
    def apply(self, documents: Union[str, Iterable[Any]]) -> list[ApplyResult]:
        """Create or update contexts (and the ACL). Bad documents are reported, others applied."""
        if isinstance(documents, str):
            try:
                documents = load_documents(documents)
            except ConfigError as exc:
                return [ApplyResult("", "error", str(exc))]
        return self._serial(self._apply, list(documents))

    def _apply(self, documents: list) -> list[ApplyResult]:
        results = []
        for raw in documents:
            name = raw.get("name", "") if isinstance(raw, dict) else ""
            try:
                doc = parse_document(raw) if isinstance(raw, dict) else raw
                if isinstance(doc, AclDoc):
                    self._set_acl(AclTable.from_dict(doc.acl))
                    results.append(ApplyResult("acl", "acl"))
                    continue
                results.append(ApplyResult(doc.name, self._apply_context(doc)))
            except (ConfigError, PolicyError) as exc:
                results.append(ApplyResult(name, "error", str(exc)))
        return results

    def _set_acl(self, acl: Optional[AclTable]):
        self.acl = acl
        text = None if acl is None else json.dumps(acl.to_dict(), sort_keys=True)
        self._meta("acl").load([TypedRecord([("acl", text)])], {}, stamp="stamp")
        self._resync()

    def set_acl(self, table: Optional[dict]):
        self._serial(self._set_acl, None if table is None else AclTable.from_dict(table))

    def _resync(self):
        """Recompute every source list and reconfigure the ingresses whose list changed."""
        new = self.composer.resolve_all()
        old = self.composer.sources
        changes = {k: (old.get(k, ()), v) for k, v in new.items() if old.get(k, ()) != v}
        self.composer.sources = new
        self._apply_changes(changes)

    def _apply_context(self, doc: ContextDoc) -> str:
        text = _doc_text(doc)
        old = self.contexts.get(doc.name)
        if old is not None and self._doc_texts.get(doc.name) == text:
            return "unchanged"
        probe = ContextState(doc)  # validates before any state changes
        views = dict(old.view_branches) if old is not None else {}
        # a changed egress flow gets a fresh view branch generation
        if old is not None:
            old_flows = {e.name: e.flow for e in old.egresses}
            for e in probe.egresses:
                if e.name in old_flows and e.flow != old_flows[e.name]:
                    views[e.name] = self._next_generation(old, e.name)
        ctx = ContextState(doc, {k: v for k, v in views.items() if k in {e.name for e in probe.egresses}})
        ctx.attach(self.lake)
        if old is None:
            self._install_new(ctx)
            status = "created"
        else:
            self._install_update(old, ctx)
            status = "updated"
        self._doc_texts[doc.name] = text
        self._persist_config(ctx)
        return status

    def _next_generation(self, ctx: ContextState, egress: str) -> str:
        n = 1
        while f"{egress}.g{n}" in ctx.pool.branches:
            n += 1
        return f"{egress}.g{n}"

    def _install_new(self, ctx: ContextState):
        self.contexts[ctx.name] = ctx
        self.composer.register(ctx)
        self._start_views(ctx)
        self._start_ingresses(ctx)
        # direct intents name their sources explicitly, so they join on sight
        for child, parent in self.composer.direct_pairs(ctx.name):
            self._apply_changes(self.composer.on_join(child, parent).changes)

    def _install_update(self, old: ContextState, ctx: ContextState):
        name = ctx.name
        # views: stop removed or regenerated ones; build new generations before repointing
        for e in old.egresses:
            key = (name, e.name)
            if ctx.view_branches.get(e.name) != old.view_branches[e.name]:
                self.views.pop(key).stop()
        for e in ctx.egresses:
            key = (name, e.name)
            if key in self.views:
                continue
            r = ViewRunner(self.lake, name, e.name, e.flow, ctx.view_branches[e.name], self.cursor_filter)
            while r.step():
                pass
            self.views[key] = self._launch(r)
        # ingresses: drop removed ones, reconfigure ones whose spec changed
        new_specs = {s.name: s for s in ctx.ingresses}
        for spec in old.ingresses:
            if spec.name not in new_specs:
                self.ingress.pop((name, spec.name)).stop()
                self.composer.sources.pop((name, spec.name), None)
        self.contexts[name] = ctx
        self.composer.register(ctx)
        before = dict(self.composer.sources)
        self._resync_quiet()
        for spec in ctx.ingresses:
            key = (name, spec.name)
            runner = self.ingress.get(key)
            srcs = self.composer.sources.get(key, ())
            if runner is None:
                r = IngressRunner(self.lake, name, spec, srcs, self._view_branch_of, self.cursor_filter)
                self.ingress[key] = self._launch(r)
            elif runner.spec != spec or before.get(key, ()) != srcs:
                runner.configure(spec, srcs)
        for key, runner in self.ingress.items():
            if key[0] != name and before.get(key, ()) != self.composer.sources.get(key, ()):
                runner.configure(runner.spec, self.composer.sources.get(key, ()))
        for child, parent in self.composer.direct_pairs(name):
            self._apply_changes(self.composer.on_join(child, parent).changes)

    def _resync_quiet(self):
        self.composer.sources = self.composer.resolve_all()

    # -- composition events ------------------------------------------------------------------
    def join(self, child: str, parent: str) -> Delta:
        return self._serial(self._join, child, parent)

    def _join(self, child, parent):
        delta = self.composer.on_join(child, parent)
        self._apply_changes(delta.changes)
        return delta

    def leave(self, child: str, parent: str) -> Delta:
        return self._serial(self._leave, child, parent)

    def _leave(self, child, parent):
        delta = self.composer.on_leave(child, parent)
        self._apply_changes(delta.changes)
        return delta

    def source_map(self) -> dict:
        return self._serial(lambda: dict(self.composer.sources))

    # -- data plane -----------------------------------------------------------------------------
    def context(self, name: str) -> ContextState:
        ctx = self.contexts.get(name)
        if ctx is None:
            raise UnknownContext(f"unknown context {name!r}")
        return ctx

    def load(self, name: str, records) -> int:
        return self.context(name).ctx_load(records)

    def _compile(self, text: Union[str, Pipeline]) -> Pipeline:
        if isinstance(text, Pipeline):
            return text
        return parse_pipeline(text)

    def _targets(self, target: Target, role: str) -> list[ContextState]:
        """Contexts a query reaches. Direct targets raise on unknown/denied; fan-out skips."""
        if target.selector == "direct":
            ctx = self.context(target.value)
            ctx.egress(target.egress)
            ok = authorize(ctx.egress(target.egress).policy, self.acl, role, str(target), at_join=False)
            self.access_log.append((role, str(target), ok))
            if not ok:
                raise AccessDenied(f"role {role!r} may not access {target}")
            return [ctx]
        out = []
        for ctx in list(self.contexts.values()):
            if not parse_intent(str(target)).matches(ctx.name, ctx.kind):
                continue
            spec = ctx._egress_by_name.get(target.egress)
            if spec is None:
                continue
            label = f"{ctx.name}@{target.egress}"
            ok = authorize(spec.policy, self.acl, role, label, at_join=False)
            self.access_log.append((role, label, ok))
            if ok:
                out.append(ctx)
        return out

    def query(self, target: Union[str, Target], pipeline: Union[str, Pipeline] = "", role: str = DEFAULT_ROLE) -> QueryResult:
        """Evaluate ``pipeline`` over an egress view, or over the union of views for a kind pattern.

        Fan-out records get a ``_ctx`` field before the pipeline runs, so
        ``sort``/``head``/aggregates see all matching contexts at once.
        """
        t = parse_target(target) if isinstance(target, str) else target
        p = self._compile(pipeline)
        ctxs = self._targets(t, role)
        report = EvalReport()
        if t.selector == "direct":
            records = ctxs[0].view_branch(t.egress).records()
        else:
            records = []
            for ctx in ctxs:
                records.extend(r.with_field(FANOUT_FIELD, ctx.name) for r in ctx.view_branch(t.egress).records())
        out = eval_pipeline(p, records, report)
        return QueryResult(out, report.scanned, [c.name for c in ctxs])

    def watch(
        self,
        target: Union[str, Target],
        pipeline: Union[str, Pipeline] = "",
        role: str = DEFAULT_ROLE,
        from_commit: int = 0,
        stop: Optional[threading.Event] = None,
        poll: float = 0.1,
    ) -> Iterator[tuple[int, list]]:
        """Yield (commit id, records) per view commit, with ``pipeline`` applied incrementally."""
        t = parse_target(target) if isinstance(target, str) else target
        if t.selector != "direct":
            raise BadRequest("watch needs a single name@egress target")
        p = self._compile(pipeline)
        ctx = self._targets(t, role)[0]
        stream = ctx.lake.watch(ctx.name, ctx.view_branches[t.egress], from_commit, stop=stop, poll=poll)

        def gen():
            state = None
            for cid, recs in stream:
                out, state = eval_batch_incremental(p, recs, state)
                yield cid, out

        return gen()

    def view_head(self, target: Union[str, Target]) -> int:
        """Next commit id of a single target's view branch."""
        t = parse_target(target) if isinstance(target, str) else target
        if t.selector != "direct":
            raise BadRequest("expected a single name@egress target")
        return self.context(t.value).view_branch(t.egress).next_id

    def describe(self) -> list[dict]:
        out = []
        for ctx in list(self.contexts.values()):
            ingress = []
            for spec in ctx.ingresses:
                runner = self.ingress.get((ctx.name, spec.name))
                ingress.append(
                    {
                        "name": spec.name,
                        "sources": [s.label for s in self.composer.sources.get((ctx.name, spec.name), ())],
                        "restarts": runner.stats.restarts if runner else 0,
                    }
                )
            egress = [{"name": e.name, "branch": ctx.view_branches[e.name]} for e in ctx.egresses]
            out.append({"name": ctx.name, "kind": str(ctx.kind), "role": ctx.role, "ingress": ingress, "egress": egress})
        return out

    # -- quiescence ---------------------------------------------------------------------------------
    def step_all(self) -> bool:
        progressed = False
        for r in self._runners():
            progressed |= r.step()
        return progressed

    def pending(self) -> bool:
        return any(r.pending() for r in self._runners())

    def quiesce(self, timeout: float = 30.0) -> bool:
        """Drive every runner until all cursors have reached their source heads."""
        deadline = time.monotonic() + timeout
        while True:
            progressed = self.step_all()
            if not progressed and not self.pending():
                return True
            if time.monotonic() > deadline:
                return False


# -- simulated source connectors ------------------------------------------------------------------


class ConnectorError(Exception):
    pass


class VirtualClock:
    """Deterministic clock for connectors: ``sleep`` advances time instead of blocking."""

    def __init__(self, start: float = 0.0):
        self.now = start

    def time(self) -> float:
        return self.now

    def sleep(self, seconds: float):
        if seconds > 0:
            self.now += seconds


class _Connector:
    def __init__(self, runtime: Runtime, target: str, clock=None):
        self.runtime = runtime
        self.target = target
        self.clock = clock or VirtualClock()
        self.emitted = 0
        self.commits = 0
        self.error: Optional[str] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _emit(self, records: list):
        self.runtime.load(self.target, records)
        self.emitted += len(records)
        self.commits += 1

    def run(self):
        if self.target not in self.runtime.contexts:
            self.error = f"unknown context {self.target!r}"
            raise ConnectorError(self.error)
        self._run()

    def _run(self):
        raise NotImplementedError

    def start(self):
        def body():
            try:
                self.run()
            except Exception as exc:
                self.error = str(exc)
                log.error("connector to %s stopped: %s", self.target, exc)

        self._thread = threading.Thread(target=body, name=f"connector-{self.target}", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()

    def join(self, timeout: Optional[float] = None):
        if self._thread is not None:
            self._thread.join(timeout)


class ReplayConnector(_Connector):
    """Replays records carrying a relative-time column (seconds) at ``speed``x.

    Records sharing a relative time are loaded in one commit. The time column
    is dropped before loading.
    """

    def __init__(self, runtime: Runtime, target: str, records: Iterable[TypedRecord], speed: float = 1.0, time_field: str = "_t", clock=None):
        super().__init__(runtime, target, clock)
        if speed <= 0:
            raise ConnectorError("speed must be positive")
        self.records = list(records)
        self.speed = speed
        self.time_field = time_field

    def _run(self):
        groups: list[tuple[float, list]] = []
        for rec in self.records:
            t = rec.get(self.time_field)
            if t is None:
                t = groups[-1][0] if groups else 0.0
            body = rec.without([self.time_field])
            if groups and groups[-1][0] == t:
                groups[-1][1].append(body)
            else:
                groups.append((t, [body]))
        start = self.clock.time()
        for t, batch in groups:
            if self._stop.is_set():
                return
            self.clock.sleep(start + t / self.speed - self.clock.time())
            self._emit(batch)


class GeneratorConnector(_Connector):
    """Emits ``floor(rate * duration)`` synthetic records, one per tick.

    ``template(i, t, rng)`` builds record ``i`` at virtual second ``t``. When
    ``epoch`` is given, each record gets ``event_ts = epoch + t``. ``batch``
    ticks are loaded per commit.
    """

    def __init__(
        self,
        runtime: Runtime,
        target: str,
        template: Callable,
        rate: float,
        duration: float,
        seed: int = 0,
        epoch: Optional[Timestamp] = None,
        batch: int = 1,
        clock=None,
    ):
        super().__init__(runtime, target, clock)
        import random

        if rate <= 0 or duration < 0:
            raise ConnectorError("rate must be positive and duration non-negative")
        self.template = template
        self.rate = rate
        self.duration = duration
        self.rng = random.Random(seed)
        self.epoch = epoch
        self.batch = max(1, batch)

    @property
    def total(self) -> int:
        import math

        return math.floor(self.rate * self.duration + 1e-9)

    def records(self) -> Iterator[tuple[float, TypedRecord]]:
        for i in range(self.total):
            t = i / self.rate
            rec = self.template(i, t, self.rng)
            if self.epoch is not None and rec.get("event_ts") is None:
                rec = rec.with_field("event_ts", self.epoch + int(round(t * 1e9)))
            yield t, rec

    def _run(self):
        start = self.clock.time()
        pending: list = []
        for t, rec in self.records():
            if self._stop.is_set():
                break
            self.clock.sleep(start + t - self.clock.time())
            pending.append(rec)
            if len(pending) >= self.batch:
                self._emit(pending)
                pending = []
        if pending:
            self._emit(pending)


__all__ = [
    "AccessDenied",
    "ApplyResult",
    "BadRequest",
    "CompositionError",
    "ConnectorError",
    "GeneratorConnector",
    "QueryResult",
    "ReplayConnector",
    "Runtime",
    "Target",
    "UnknownContext",
    "UnknownEgress",
    "VirtualClock",
    "parse_target",
]
