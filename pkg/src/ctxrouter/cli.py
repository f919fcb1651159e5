"""``ctxr``: thin command-line client for a running ctxrouter service.

Exit codes: 0 on success, 2 when access is denied, 1 for anything else.
"""

from __future__ import annotations

import sys

import click
import httpx

from ctxrouter.flow import parse_pipeline, qcx
from ctxrouter.flow.parser import PipelineSyntaxError
from ctxrouter.service import listen_address

EXIT_DENIED = 2
EXIT_ERROR = 1


class _Client:
    def __init__(self, addr: str, role: str, timeout: float = 30.0):
        host, port = listen_address(addr)
        self.base = f"http://{host}:{port}"
        self.role = role
        self.timeout = timeout

    def request(self, method: str, path: str, **kw) -> httpx.Response:
        headers = {"X-Role": self.role, **kw.pop("headers", {})}
        try:
            resp = httpx.request(method, self.base + path, headers=headers, timeout=self.timeout, **kw)
        except httpx.HTTPError as exc:
            fail(f"cannot reach {self.base}: {exc}")
        check(resp)
        return resp

    def stream(self, path: str, **kw):
        headers = {"X-Role": self.role}
        try:
            return httpx.stream("GET", self.base + path, headers=headers, timeout=None, **kw)
        except httpx.HTTPError as exc:
            fail(f"cannot reach {self.base}: {exc}")


def fail(message: str, code: int = EXIT_ERROR):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _error_text(resp: httpx.Response) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text.strip() or resp.reason_phrase
    if isinstance(body, dict) and "error" in body:
        return body["error"]
    if isinstance(body, dict) and "results" in body:
        return "; ".join(f"{r['name']}: {r['error']}" for r in body["results"] if r.get("error"))
    return str(body)


def check(resp: httpx.Response):
    if resp.status_code < 400:
        return
    fail(_error_text(resp), EXIT_DENIED if resp.status_code == 403 else EXIT_ERROR)


@click.group()
@click.option("--addr", envvar="CTXR_LISTEN", default=None, help="service address host:port")
@click.option("--role", default="anonymous", show_default=True, help="role sent in the X-Role header")
@click.pass_context
def main(ctx, addr, role):
    """Talk to a ctxrouter service."""
    ctx.obj = _Client(addr, role)


@main.command()
@click.option("-f", "files", multiple=True, required=True, type=click.File("r"), help="YAML document file")
@click.pass_obj
def apply(client, files):
    """Create or update contexts (and the ACL) from YAML documents."""
    text = "\n---\n".join(f.read() for f in files)
    try:
        resp = httpx.post(client.base + "/apply", content=text.encode(), headers={"X-Role": client.role}, timeout=client.timeout)
    except httpx.HTTPError as exc:
        fail(f"cannot reach {client.base}: {exc}")
    if resp.status_code not in (200, 400) or "results" not in resp.text:
        check(resp)
    failed = False
    for r in resp.json()["results"]:
        line = f"{r['name'] or '-'}\t{r['status']}"
        if r.get("error"):
            line += f"\t{r['error']}"
            failed = True
        click.echo(line)
    if failed:
        sys.exit(EXIT_ERROR)


def _composition(client, op, child, parent):
    body = client.request("POST", f"/{op}", json={"child": child, "parent": parent}).json()
    changed = ", ".join(body["changed"]) or "no source changes"
    click.echo(f"{op} {child} -> {parent}: {changed}")


@main.command()
@click.option("-l", "leave_", is_flag=True, help="leave instead of join")
@click.argument("child")
@click.argument("parent")
@click.pass_obj
def join(client, leave_, child, parent):
    """Declare CHILD a source for PARENT (or withdraw it with -l)."""
    _composition(client, "leave" if leave_ else "join", child, parent)


@main.command()
@click.argument("child")
@click.argument("parent")
@click.pass_obj
def leave(client, child, parent):
    """Same as ``join -l``."""
    _composition(client, "leave", child, parent)


@main.command()
@click.argument("target")
@click.argument("pipeline", default="")
@click.pass_obj
def query(client, target, pipeline):
    """Run PIPELINE over TARGET (name@egress or kind:pattern@egress)."""
    resp = client.request("GET", "/query", params={"target": target, "q": pipeline})
    sys.stdout.buffer.write(resp.content)
    sys.stdout.flush()


@main.command()
@click.argument("ctx_name", metavar="CTX")
@click.pass_obj
def load(client, ctx_name):
    """Load record-lines from stdin into CTX."""
    data = sys.stdin.buffer.read()
    body = client.request("POST", "/load", params={"ctx": ctx_name}, content=data).json()
    click.echo(f"commit {body['commit']}: {body['count']} records")


@main.command()
@click.argument("target")
@click.argument("pipeline", default="")
@click.option("--from", "from_", default=0, show_default=True, help="first commit id")
@click.option("--follow/--no-follow", default=True, help="keep streaming new commits")
@click.option("--limit", type=int, default=None, help="stop after this many commits")
@click.pass_obj
def watch(client, target, pipeline, from_, follow, limit):
    """Stream TARGET's view commits as record-lines."""
    params = {"target": target, "q": pipeline, "from": from_, "follow": str(follow).lower()}
    if limit is not None:
        params["limit"] = limit
    try:
        with client.stream("/watch", params=params) as resp:
            if resp.status_code >= 400:
                resp.read()
                check(resp)
            for chunk in resp.iter_bytes():
                sys.stdout.buffer.write(chunk)
                sys.stdout.flush()
    except httpx.HTTPError as exc:
        fail(f"cannot reach {client.base}: {exc}")
    except KeyboardInterrupt:
        pass


@main.command("ls")
@click.pass_obj
def ls_(client):
    """List contexts with their resolved sources."""
    for c in client.request("GET", "/contexts").json():
        click.echo(f"{c['name']}\t{c['kind']}\trole={c['role']}")
        for i in c["ingress"]:
            click.echo(f"  ingress {i['name']}: {', '.join(i['sources']) or '-'}")
        for e in c["egress"]:
            click.echo(f"  egress {e['name']} ({e['branch']})")


@main.command("qcx")
@click.argument("args", nargs=-1, required=True)
def qcx_(args):
    """Print the query complexity of: TARGET... PIPELINE (computed locally)."""
    if len(args) < 2:
        fail("need at least one target and a pipeline")
    *targets, text = args
    try:
        click.echo(qcx(targets, parse_pipeline(text)))
    except PipelineSyntaxError as exc:
        fail(str(exc))


@main.command()
@click.option("--data-dir", envvar="CTXR_DATA_DIR", default="ctxr-data", show_default=True)
@click.option("--listen", envvar="CTXR_LISTEN", default=None, help="bind address host:port")
def serve(data_dir, listen):
    """Run the service in the foreground."""
    from ctxrouter.service import serve as run

    run(data_dir, listen)


if __name__ == "__main__":
    main()
