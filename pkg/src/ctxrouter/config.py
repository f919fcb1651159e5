"""Declarative context documents (YAML or JSON) and context kinds."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*")
_KIND_PART = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*")

# Branch names a context uses internally; egresses may not take them.
RESERVED_EGRESS = frozenset({"main", "errors", "log"})


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Kind:
    group: str
    version: str
    name: str

    @classmethod
    def parse(cls, text: str) -> "Kind":
        parts = text.split("/")
        if len(parts) != 3 or not all(_KIND_PART.fullmatch(p) for p in parts):
            raise ConfigError(f"kind must be group/version/name, got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.group}/{self.version}/{self.name}"


def check_name(what: str, name: str) -> str:
    if not isinstance(name, str) or not _IDENT.fullmatch(name):
        raise ValueError(f"invalid {what} {name!r}: use letters, digits, '_' or '-'")
    return name


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolicyDoc(_Doc):
    mode: Literal["allow", "block"] = "allow"
    roles: list[str] = Field(default_factory=list)


class IngressPolicyDoc(_Doc):
    # what happens to source schemas that match none of a non-empty rule list
    unmatched: Literal["accept", "reject", "drop"] = "accept"


class RuleDoc(_Doc):
    match: str
    action: str


class IngressDoc(_Doc):
    name: str
    intent: list[str] = Field(default_factory=list)
    sources: list[str] = Field(default_factory=list)
    rules: list[Union[RuleDoc, str]] = Field(default_factory=list)
    flow: str = ""
    flow_agg: str = ""
    patch_from: bool = False
    policy: IngressPolicyDoc = Field(default_factory=IngressPolicyDoc)

    @field_validator("intent", "sources", mode="before")
    @classmethod
    def _listify(cls, v):
        if v is None:
            return []
        return [v] if isinstance(v, str) else v

    @field_validator("name")
    @classmethod
    def _name(cls, v):
        return check_name("ingress name", v)


class EgressDoc(_Doc):
    name: str
    flow: str = ""
    policy: Optional[PolicyDoc] = None
    schemas: list[str] = Field(default_factory=list)

    @field_validator("name")
    @classmethod
    def _name(cls, v):
        check_name("egress name", v)
        if v in RESERVED_EGRESS:
            raise ValueError(f"egress name {v!r} is reserved")
        return v


class ContextDoc(_Doc):
    kind: str
    name: str
    role: Optional[str] = None
    ingress: list[IngressDoc] = Field(default_factory=list)
    egress: list[EgressDoc] = Field(default_factory=list)

    @field_validator("name")
    @classmethod
    def _name(cls, v):
        check_name("context name", v)
        if v.startswith("_"):
            raise ValueError("context names starting with '_' are reserved")
        return v

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        Kind.parse(v)
        return v

    @model_validator(mode="after")
    def _unique(self):
        for what, items in (("ingress", self.ingress), ("egress", self.egress)):
            names = [i.name for i in items]
            dup = {n for n in names if names.count(n) > 1}
            if dup:
                raise ValueError(f"duplicate {what} names: {sorted(dup)}")
        return self

    @property
    def effective_role(self) -> str:
        return self.role or self.name


class AclDoc(_Doc):
    acl: dict[str, list[str]]


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        parts.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(parts)


def parse_document(data: Any) -> Union[ContextDoc, AclDoc]:
    if not isinstance(data, dict):
        raise ConfigError("document must be a mapping")
    try:
        if "acl" in data:
            return AclDoc.model_validate(data)
        return ContextDoc.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_documents(text: str) -> list[Any]:
    """Split a YAML stream into raw documents (skipping empty ones)."""
    try:
        docs = [d for d in yaml.safe_load_all(text) if d is not None]
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    out = []
    for d in docs:
        if isinstance(d, list):
            out.extend(d)
        else:
            out.append(d)
    return out
