"""One context data router: metadata, store pool, ingress specs and egress views."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional

from ctxrouter.cdg import MatchActionRule, RuleError, SourcingIntent, parse_intent, parse_rules
from ctxrouter.config import ConfigError, ContextDoc, Kind
from ctxrouter.flow import EvalReport, Pipeline, eval_pipeline, parse_pipeline
from ctxrouter.flow.parser import PipelineSyntaxError
from ctxrouter.policy import AclTable, EgressPolicy, authorize
from ctxrouter.record import RecordError, Schema, TypedRecord
from ctxrouter.store import MAIN, Lake, Pool

ERRORS_BRANCH = "errors"
LOG_BRANCH = "log"


class AccessDenied(Exception):
    status = 403


class UnknownEgress(Exception):
    status = 404


@dataclass(frozen=True)
class IngressSpec:
    name: str
    intents: tuple[SourcingIntent, ...]
    rules: tuple[MatchActionRule, ...]
    flow: Pipeline
    flow_agg: Pipeline
    patch_from: bool
    unmatched: str


@dataclass(frozen=True)
class EgressSpec:
    name: str
    flow: Pipeline
    policy: Optional[EgressPolicy]
    schemas: tuple[Schema, ...]


def _pipeline(text: str, where: str) -> Pipeline:
    try:
        return parse_pipeline(text)
    except PipelineSyntaxError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_specs(doc: ContextDoc) -> tuple[tuple[IngressSpec, ...], tuple[EgressSpec, ...]]:
    ingresses = []
    for ig in doc.ingress:
        where = f"ingress {ig.name}"
        try:
            intents = [parse_intent(t) for t in ig.intent] + [parse_intent(t, direct=True) for t in ig.sources]
            rules = parse_rules(ig.rules)
        except RuleError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        unique = []
        for i in intents:
            if i not in unique:
                unique.append(i)
        ingresses.append(
            IngressSpec(
                ig.name,
                tuple(unique),
                rules,
                _pipeline(ig.flow, f"{where} flow"),
                _pipeline(ig.flow_agg, f"{where} flow_agg"),
                ig.patch_from,
                ig.policy.unmatched,
            )
        )
    egresses = []
    for eg in doc.egress:
        where = f"egress {eg.name}"
        policy = None
        if eg.policy is not None:
            policy = EgressPolicy(eg.policy.mode, frozenset(eg.policy.roles))
        try:
            schemas = tuple(Schema.parse(s) for s in eg.schemas)
        except RecordError as exc:
            raise ConfigError(f"{where} schemas: {exc}") from None
        egresses.append(EgressSpec(eg.name, _pipeline(eg.flow, f"{where} flow"), policy, schemas))
    return tuple(ingresses), tuple(egresses)


class ContextState:
    """A validated context. ``attach`` binds it to its pool in a lake."""

    def __init__(self, doc: ContextDoc, view_branches: Optional[dict[str, str]] = None):
        self.doc = doc
        self.name = doc.name
        self.kind = Kind.parse(doc.kind)
        self.role = doc.effective_role
        self.ingresses, self.egresses = build_specs(doc)
        self._egress_by_name = {e.name: e for e in self.egresses}
        # egress id -> branch currently holding its view
        self.view_branches = dict(view_branches or {})
        for e in self.egresses:
            self.view_branches.setdefault(e.name, e.name)
        self.pool: Optional[Pool] = None
        self.lake: Optional[Lake] = None
        self._observed: dict[str, tuple[Schema, ...]] = {}
        self._lock = threading.Lock()

    def __repr__(self):
        return f"ContextState({self.name}, {self.kind})"

    # -- lake binding --------------------------------------------------------------
    def attach(self, lake: Lake) -> "ContextState":
        self.lake = lake
        self.pool = lake.ensure_pool(self.name)
        for e in self.egresses:
            self.pool.ensure_branch(self.view_branches[e.name])
        return self

    @property
    def branches(self) -> list[str]:
        return sorted(self.pool.branches) if self.pool else []

    def main(self):
        return self.pool.branch(MAIN)

    def view_branch(self, egress: str):
        self.egress(egress)
        return self.pool.branch(self.view_branches[egress])

    def errors_branch(self):
        return self.pool.ensure_branch(ERRORS_BRANCH)

    def log_branch(self):
        return self.pool.ensure_branch(LOG_BRANCH)

    # -- specs (the composition engine reads these) -------------------------------------
    def ingress_specs(self):
        return self.ingresses

    def egress_specs(self):
        return self.egresses

    def ingress(self, name: str) -> IngressSpec:
        for i in self.ingresses:
            if i.name == name:
                return i
        raise KeyError(name)

    def egress(self, name: str) -> EgressSpec:
        try:
            return self._egress_by_name[name]
        except KeyError:
            raise UnknownEgress(f"context {self.name} has no egress {name!r}") from None

    def advertised_schemas(self, egress: str) -> list[Schema]:
        """Declared schemas plus those observed in the view's first commit."""
        spec = self.egress(egress)
        out = list(spec.schemas)
        observed = self._observed.get(egress)
        if observed is None and self.pool is not None:
            commits = self.view_branch(egress).commits(0)[:1]
            if commits:
                seen = []
                for r in commits[0].records:
                    if r.schema not in seen:
                        seen.append(r.schema)
                observed = tuple(seen)
                with self._lock:
                    self._observed[egress] = observed
        for s in observed or ():
            if s not in out:
                out.append(s)
        return out

    # -- data-plane operations -------------------------------------------------------------
    def ctx_load(self, records) -> int:
        """Stamp records (ts := now, event_ts kept or defaulted to ts) and commit to main."""
        return self.main().load(records, {}, stamp="stamp")

    def authorize_query(self, egress: str, role: str, acl: Optional[AclTable]) -> EgressSpec:
        spec = self.egress(egress)
        if not authorize(spec.policy, acl, role, f"{self.name}@{egress}", at_join=False):
            raise AccessDenied(f"role {role!r} may not access {self.name}@{egress}")
        return spec

    def egress_query(
        self,
        egress: str,
        pipeline: Pipeline,
        role: str,
        acl: Optional[AclTable] = None,
        report: Optional[EvalReport] = None,
    ) -> list[TypedRecord]:
        self.authorize_query(egress, role, acl)
        return eval_pipeline(pipeline, self.view_branch(egress).records(), report)

    def egress_watch(
        self,
        egress: str,
        role: str,
        acl: Optional[AclTable] = None,
        from_commit: int = 0,
        stop: Optional[threading.Event] = None,
        poll: float = 0.1,
    ) -> Iterator[tuple[int, tuple]]:
        """Authorize now, then stream view commits (id, records) in order."""
        self.authorize_query(egress, role, acl)
        branch = self.view_branches[egress]
        return self.lake.watch(self.name, branch, from_commit, stop=stop, poll=poll)
