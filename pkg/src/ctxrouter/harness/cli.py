"""ctxr-harness: run scenarios, the query benchmark and the crash drivers.

Each command prints its report as record-lines on stdout, then a human
summary on stderr, and exits 0 on pass and 1 on fail.
"""

from __future__ import annotations

import sys

import click

from ctxrouter.record import serialize_lines


def _finish(report) -> None:
    sys.stdout.write(serialize_lines(report.to_records()))
    sys.stdout.flush()
    click.echo(report.summary(), err=True)
    sys.exit(0 if report.passed else 1)


@click.group()
def main():
    """Desk-scale scenarios, benchmark and fault injection."""


@main.command()
@click.argument("name")
@click.option("--seed", default=0, show_default=True)
@click.option("--rooms", default=4, show_default=True)
def run(name, seed, rooms):
    """Run one scenario (or "all")."""
    from ctxrouter.harness.scenarios import SCENARIOS, scenario

    names = list(SCENARIOS) if name == "all" else [name]
    if name != "all" and name not in SCENARIOS:
        raise click.BadParameter(f"choose from all, {', '.join(SCENARIOS)}", param_hint="NAME")
    ok = True
    for n in names:
        report = scenario(n, seed=seed, rooms=rooms)
        sys.stdout.write(serialize_lines(report.to_records()))
        click.echo(report.summary(), err=True)
        ok &= report.passed
    sys.exit(0 if ok else 1)


@main.command()
@click.option("--rooms", default=4, show_default=True)
@click.option("--records", "records_per_device", default=1000, show_default=True, help="records per device")
@click.option("--seed", default=0, show_default=True)
def bench(rooms, records_per_device, seed):
    """Compare querying context data with querying raw device data."""
    from ctxrouter.harness.bench import bench_query_orientation

    _finish(bench_query_orientation(rooms, records_per_device, seed))


@main.command()
@click.option("--records", default=10_000, show_default=True)
@click.option("--kills", default=25, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--no-cursor-filter", is_flag=True, help="recover without cursors (expected to fail)")
def crash(records, kills, seed, no_cursor_filter):
    """Kill and restart the pipelets of a device -> room -> building chain."""
    from ctxrouter.harness.crash import crash_test

    _finish(crash_test(records, kills, seed, cursor_filter=not no_cursor_filter))


@main.command()
@click.option("--kills", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
def durability(kills, seed):
    """SIGKILL a writer process repeatedly and check every reopened store."""
    from ctxrouter.harness.crash import durability_test

    _finish(durability_test(kills, seed))


if __name__ == "__main__":
    main()
