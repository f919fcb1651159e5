"""HTTP surface over a :class:`Runtime`.

Record payloads (query results, loads, watch streams) are record-lines text;
control calls use small JSON bodies. The caller's role comes from the
``X-Role`` header.
"""

from __future__ import annotations

import os
import threading
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse

from ctxrouter.cdg import CompositionError, Delta
from ctxrouter.config import ConfigError
from ctxrouter.context import AccessDenied, UnknownEgress
from ctxrouter.flow.parser import PipelineSyntaxError
from ctxrouter.record import RecordError, parse_lines, serialize_lines
from ctxrouter.runtime import DEFAULT_ROLE, BadRequest, Runtime
from ctxrouter.schemas import (
    ApplyItem,
    ApplyResponse,
    ContextInfo,
    JoinRequest,
    JoinResponse,
    LoadResponse,
)

DEFAULT_LISTEN = "127.0.0.1:8710"
DEFAULT_DATA_DIR = "ctxr-data"
RECORD_LINES = "application/x-record-lines"

_STATUS = [
    (AccessDenied, 403),
    (UnknownEgress, 404),
    (CompositionError, None),  # carries its own status
    (BadRequest, 400),
    (PipelineSyntaxError, 400),
    (RecordError, 400),
    (ConfigError, 400),
]


def status_for(exc: Exception) -> int:
    for cls, code in _STATUS:
        if isinstance(exc, cls):
            return code if code is not None else getattr(exc, "status", 400)
    return 500


def listen_address(text: Optional[str] = None) -> tuple[str, int]:
    text = text or os.environ.get("CTXR_LISTEN") or DEFAULT_LISTEN
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _delta_response(op: str, delta: Delta) -> JoinResponse:
    a = delta.association
    return JoinResponse(op=op, child=a.child, parent=a.parent, changed=[f"{c}#{i}" for c, i in delta.changed])


def create_app(runtime: Optional[Runtime] = None, data_dir: Optional[str] = None) -> FastAPI:
    """Build the app. Without ``runtime`` one is opened at startup from ``CTXR_DATA_DIR``."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        owned = None
        if getattr(app.state, "runtime", None) is None:
            owned = Runtime(data_dir or os.environ.get("CTXR_DATA_DIR", DEFAULT_DATA_DIR))
            app.state.runtime = owned
        try:
            yield
        finally:
            if owned is not None:
                owned.close()
                app.state.runtime = None

    app = FastAPI(title="ctxrouter", lifespan=lifespan)
    app.state.runtime = runtime

    def rt() -> Runtime:
        return app.state.runtime

    async def _errors(request: Request, exc: Exception):
        return JSONResponse({"error": str(exc)}, status_code=status_for(exc))

    for cls, _ in _STATUS:
        app.add_exception_handler(cls, _errors)

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.post("/apply", response_model=ApplyResponse)
    async def apply(request: Request):
        text = (await request.body()).decode("utf-8")
        results = rt().apply(text)
        body = ApplyResponse(results=[ApplyItem(name=r.name, status=r.status, error=r.error) for r in results])
        return JSONResponse(body.model_dump(), status_code=200 if body.ok else 400)

    @app.post("/join", response_model=JoinResponse)
    def join(req: JoinRequest):
        return _delta_response("join", rt().join(req.child, req.parent))

    @app.post("/leave", response_model=JoinResponse)
    def leave(req: JoinRequest):
        return _delta_response("leave", rt().leave(req.child, req.parent))

    @app.get("/query")
    def query(target: str, q: str = "", x_role: str = Header(DEFAULT_ROLE)):
        res = rt().query(target, q, role=x_role)
        headers = {"X-Records-Scanned": str(res.scanned), "X-Contexts": ",".join(res.contexts)}
        return PlainTextResponse(serialize_lines(res.records), media_type=RECORD_LINES, headers=headers)

    @app.post("/load", response_model=LoadResponse)
    async def load(ctx: str, request: Request):
        text = (await request.body()).decode("utf-8")
        records = parse_lines(text)
        if not records:
            raise BadRequest("no records in request body")
        cid = rt().load(ctx, records)
        return LoadResponse(commit=cid, count=len(records))

    @app.get("/watch")
    def watch(
        target: str,
        q: str = "",
        from_: int = Query(0, alias="from", ge=0),
        follow: bool = True,
        limit: Optional[int] = Query(None, ge=1),
        x_role: str = Header(DEFAULT_ROLE),
    ):
        runtime = rt()
        stop = threading.Event()
        # authorization and target errors surface here, before streaming starts
        stream = runtime.watch(target, q, role=x_role, from_commit=from_, stop=stop)
        end = runtime.view_head(target)
        if from_ > end:
            raise BadRequest(f"watch start {from_} is beyond the next commit id {end}")

        def body():
            sent = 0
            try:
                if not follow and from_ >= end:
                    return
                for cid, recs in stream:
                    if recs:
                        yield serialize_lines(recs)
                    sent += 1
                    if (limit is not None and sent >= limit) or (not follow and cid + 1 >= end):
                        return
            finally:
                stop.set()

        return StreamingResponse(body(), media_type=RECORD_LINES)

    @app.get("/contexts", response_model=list[ContextInfo])
    def contexts():
        return [ContextInfo.model_validate(c) for c in rt().describe()]

    return app


def serve(data_dir: Optional[str] = None, listen: Optional[str] = None):
    import uvicorn

    host, port = listen_address(listen)
    uvicorn.run(create_app(data_dir=data_dir), host=host, port=port, log_level="info")
