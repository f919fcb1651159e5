"""Request and response bodies of the HTTP service (record payloads travel as record-lines)."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class JoinRequest(BaseModel):
    child: str
    parent: str


class JoinResponse(BaseModel):
    op: str
    child: str
    parent: str
    changed: list[str] = Field(default_factory=list, description="ingresses whose sources changed, as ctx#ingress")


class ApplyItem(BaseModel):
    name: str
    status: str
    error: Optional[str] = None


class ApplyResponse(BaseModel):
    results: list[ApplyItem]

    @property
    def ok(self) -> bool:
        return all(r.status != "error" for r in self.results)


class LoadResponse(BaseModel):
    commit: int
    count: int


class IngressInfo(BaseModel):
    name: str
    sources: list[str]
    restarts: int


class EgressInfo(BaseModel):
    name: str
    branch: str


class ContextInfo(BaseModel):
    name: str
    kind: str
    role: str
    ingress: list[IngressInfo]
    egress: list[EgressInfo]


class ErrorResponse(BaseModel):
    error: str
