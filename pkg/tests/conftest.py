from ctxrouter.config import ContextDoc
from ctxrouter.context import ContextState


def make_ctx(name, kind="cot.dev/v1/thing", role=None, ingress=(), egress=()):
    doc = {"kind": kind, "name": name, "ingress": list(ingress), "egress": list(egress)}
    if role:
        doc["role"] = role
    return ContextState(ContextDoc.model_validate(doc))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
