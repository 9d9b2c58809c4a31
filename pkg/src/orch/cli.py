"""orch command line: submit, validate, simulate."""

import argparse
import asyncio
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from orch import logs, settings
from orch.backends.local import LocalBackend
from orch.backends.sim import SimClusterConfig
from orch.config import describe, parse_config
from orch.errors import ConfigError, OrchError, ScenarioError
from orch.harness import JobShapeBounds, ScenarioScript, check_invariants, load_scenario, random_scenarios, run_batch, run_scenario
from orch.model import JobState, ResourceRequest
from orch.packaging import package
from orch.report import coverage, summarize
from orch.server import serve_job
from orch.trace import HORIZON_EXCEEDED

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CLIENT = 2


class StatusPrinter:
    """Turns status snapshots into the line stream users watch.

    One line per change, listing only the tasks whose status changed; the UI
    URL and every task's log link are printed once, on first availability.
    """

    def __init__(self, out=None):
        self.out = out if out is not None else sys.stdout
        self.last = None
        self._state = None
        self._statuses = {}
        self._ui = False
        self._logged = set()

    def _print(self, line):
        print(line, file=self.out, flush=True)

    def __call__(self, snap, now):
        self.last = snap
        changed = [v for v in snap.tasks if self._statuses.get(v.task) != v.status]
        if changed or (snap.state, snap.attempt) != self._state:
            parts = [f"t={now}", f"job={snap.state.value}", f"attempt={snap.attempt}"]
            parts += [f"{v.task}:{v.status.value}" for v in changed]
            self._print(" ".join(parts))
        self._state = (snap.state, snap.attempt)
        self._statuses = {v.task: v.status for v in snap.tasks}
        if snap.ui_url and not self._ui:
            self._ui = True
            self._print(f"UI: {snap.ui_url}")
        for task, link in snap.log_links.items():
            if task not in self._logged:
                self._logged.add(task)
                self._print(f"LOG: {task} {link}")

    def finish(self):
        if self.last is not None and self.last.state == JobState.FAILED:
            for d in self.last.diagnostics:
                self._print(f"DIAG: {d}")


def build_parser():
    p = argparse.ArgumentParser(prog="orch", description="gang-scheduled distributed job orchestrator")
    p.add_argument("--log-level", default=None, help="default from ORCH_LOG_LEVEL")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("submit", help="run a job")
    s.add_argument("--conf", required=True, help="job configuration (xml)")
    s.add_argument("--backend", required=True, choices=["sim", "local"])
    s.add_argument("--set", action="append", default=[], metavar="NAME=VALUE", help="override a property")
    s.add_argument("--src-dir", help="program directory to package (local backend)")
    s.add_argument("--workdir", help="logs, containers and trace (local backend)")
    s.add_argument("--slots", type=int, default=settings.LOCAL_SLOTS, help="concurrent containers (local backend)")
    s.add_argument("--seed", type=int, default=0, help="sim backend seed")
    s.add_argument("--recovery-order", choices=settings.RECOVERY_ORDERS, default="release-first")
    s.add_argument("task_params", nargs="*", help="appended to the job command")

    v = sub.add_parser("validate", help="check a job configuration")
    v.add_argument("--conf", required=True)
    v.add_argument("--set", action="append", default=[], metavar="NAME=VALUE")

    m = sub.add_parser("simulate", help="run scenarios on the simulated cluster")
    m.add_argument("--scenario", help="scenario document (json)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--random", type=int, default=0, metavar="N", help="run N generated scenarios instead")
    m.add_argument("--max-groups", type=int, default=None, help="--random job shape bound")
    m.add_argument("--max-instances", type=int, default=None, help="--random job shape bound")
    m.add_argument("--max-faults", type=int, default=None, help="--random faults per scenario bound")
    m.add_argument("--recovery-order", choices=settings.RECOVERY_ORDERS, default=None)
    m.add_argument("--trace-out", help="write the trace of --scenario here")
    m.add_argument("--summary-out", help="write the --random summary table here (csv)")
    return p


def _load_spec(args):
    try:
        document = Path(args.conf).read_bytes()
    except OSError as err:
        raise ConfigError(f"cannot read {args.conf}: {err}") from None
    return parse_config(document, args.set)


def _sim_cluster(spec):
    biggest = ResourceRequest(
        max(g.resources.memory_mb for g in spec.groups),
        max(g.resources.vcores for g in spec.groups),
        max(g.resources.gpus for g in spec.groups),
    )
    return SimClusterConfig.uniform(spec.total_instances, biggest)


def cmd_submit(args):
    spec = _load_spec(args)
    spec = replace(spec, command=tuple(spec.command) + tuple(args.task_params))
    if not spec.command:
        raise ConfigError("orch.application.command is required to submit")
    printer = StatusPrinter()

    if args.backend == "sim":
        script = ScenarioScript(cluster=_sim_cluster(spec), job=spec, recovery_order=args.recovery_order)
        trace = run_scenario(script, args.seed, on_status=printer)
        printer.finish()
        return EXIT_OK if trace.outcome == JobState.SUCCEEDED.value else EXIT_FAILED

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="orch-"))
    workdir.mkdir(parents=True, exist_ok=True)
    archive = None
    if args.src_dir:
        pkg = package(args.src_dir, spec)
        spec = replace(spec, archive_path=str(pkg.write(workdir / "package.tar")))
        archive = pkg.archive
    print(f"workdir: {workdir}", flush=True)
    backend = LocalBackend(workdir, slots=args.slots, archive=archive)
    snap = asyncio.run(
        serve_job(spec, backend, on_status=printer, trace_path=workdir / "trace.ndjson", recovery_order=args.recovery_order)
    )
    printer.finish()
    return EXIT_OK if snap.state == JobState.SUCCEEDED else EXIT_FAILED


def cmd_validate(args):
    spec = _load_spec(args)
    for line in describe(spec):
        print(line)
    return EXIT_OK


def cmd_simulate(args):
    if args.random:
        shape = {
            "max_groups": args.max_groups,
            "max_instances": args.max_instances,
            "max_faults": args.max_faults,
            "recovery_order": args.recovery_order,
        }
        bounds = JobShapeBounds(**{k: v for k, v in shape.items() if v is not None})
        results = run_batch(random_scenarios(bounds, args.random, args.seed), args.seed)
        summary = summarize(results)
        if args.summary_out:
            summary.to_csv(args.summary_out, index=False)
            print(f"saved {args.summary_out}")
        print(summary["outcome"].value_counts().to_string())
        print(coverage(summary).to_string())
        bad = int(summary["violations"].sum())
        stuck = int((summary["outcome"] == HORIZON_EXCEEDED).sum())
        print(f"violations: {bad}")
        print(f"horizon exceeded: {stuck}")
        return EXIT_OK if bad == 0 and stuck == 0 else EXIT_FAILED

    if not args.scenario:
        raise ScenarioError("simulate needs --scenario or --random")
    script = load_scenario(args.scenario)
    if args.recovery_order:
        script = replace(script, recovery_order=args.recovery_order)
    trace = run_scenario(script, args.seed)
    if args.trace_out:
        trace.write(args.trace_out)
    violations = check_invariants(trace)
    print(f"outcome: {trace.outcome}")
    print(f"records: {len(trace)}")
    for v in violations:
        print(f"VIOLATION {v.rule} at {v.index}: {v.detail}")
    ok = not violations and trace.outcome != HORIZON_EXCEEDED
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {"submit": cmd_submit, "validate": cmd_validate, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logs.setup(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except OrchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CLIENT


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
