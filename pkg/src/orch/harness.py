"""Scenario runner and trace invariant checker for the simulated backend."""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Tuple

import numpy as np

from orch import settings
from orch.backends.base import Tick
from orch.backends.sim import (
    ChildBehavior,
    ChildExit,
    DelayAllocation,
    DropHeartbeats,
    KillTask,
    SimClusterConfig,
    SimScheduler,
)
from orch.errors import InfeasibleBounds, InvalidJobSpec, ScenarioError
from orch.master import Master
from orch.model import ZERO, JobSpec, ResourceRequest, TaskGroupSpec, TaskId, job_spec_errors
from orch.runtime import JobRunner, Transport
from orch.trace import HORIZON_EXCEEDED, Trace

log = logging.getLogger(__name__)

ACTIONS = {a.kind: a for a in (KillTask, DropHeartbeats, DelayAllocation, ChildExit)}


@dataclass(frozen=True)
class ScenarioScript:
    cluster: SimClusterConfig
    job: JobSpec
    actions: Tuple[Tuple[int, object], ...] = ()
    default_child: ChildBehavior = ChildBehavior()
    children: Mapping[str, ChildBehavior] = field(default_factory=dict)
    recovery_order: str = "release-first"
    horizon_ms: int = settings.HORIZON_MS


def validate_scenario(script: ScenarioScript) -> ScenarioScript:
    errs = job_spec_errors(script.job)
    if errs:
        raise InvalidJobSpec(errs)
    for at, action in script.actions:
        if at < 0:
            raise ScenarioError(f"negative action time {at}")
        if not script.job.has_task(action.task):
            raise ScenarioError(f"{action.kind} names unknown task {action.task}")
    if script.recovery_order not in settings.RECOVERY_ORDERS:
        raise ScenarioError(f"unknown recovery order {script.recovery_order!r}")
    if script.horizon_ms < 1:
        raise ScenarioError("horizon_ms must be >= 1")
    return script


# scenario documents

def _job_from_dict(d):
    groups = tuple(
        TaskGroupSpec(
            g["name"],
            int(g["instances"]),
            ResourceRequest(
                int(g.get("memory_mb", settings.DEFAULT_MEMORY_MB)),
                int(g.get("vcores", settings.DEFAULT_VCORES)),
                int(g.get("gpus", settings.DEFAULT_GPUS)),
            ),
            bool(g.get("tracked", g["name"] not in settings.UNTRACKED_GROUPS)),
        )
        for g in d["groups"]
    )
    return JobSpec(
        job_name=d.get("name", settings.DEFAULT_JOB_NAME),
        groups=groups,
        command=tuple(d.get("command", ())),
        max_attempts=int(d.get("max_attempts", settings.MAX_ATTEMPTS)),
        heartbeat_interval_ms=int(d.get("heartbeat_ms", settings.HEARTBEAT_MS)),
        heartbeat_miss_limit=int(d.get("miss_limit", settings.HEARTBEAT_MISS_LIMIT)),
        teardown_grace_ms=int(d.get("grace_ms", settings.TEARDOWN_GRACE_MS)),
        scheduler_config=dict(d.get("scheduler", {})),
    )


def _job_to_dict(job: JobSpec):
    return {
        "name": job.job_name,
        "groups": [
            {"name": g.name, "instances": g.instances, "tracked": g.tracked, **g.resources.as_dict()}
            for g in job.groups
        ],
        "command": list(job.command),
        "max_attempts": job.max_attempts,
        "heartbeat_ms": job.heartbeat_interval_ms,
        "miss_limit": job.heartbeat_miss_limit,
        "grace_ms": job.teardown_grace_ms,
        "scheduler": dict(job.scheduler_config),
    }


def _action_from_dict(d):
    kind = d.get("kind")
    if kind not in ACTIONS:
        raise ScenarioError(f"unknown action kind {kind!r}")
    task = TaskId.parse(d["task"])
    if kind == "kill_task":
        action = KillTask(task)
    elif kind == "drop_heartbeats":
        action = DropHeartbeats(task, int(d["duration_ms"]))
    elif kind == "delay_allocation":
        action = DelayAllocation(task, int(d["extra_ms"]))
    else:
        action = ChildExit(task, int(d["code"]), int(d.get("after_ms", 0)))
    return int(d["at"]), action


def _action_to_dict(at, a):
    d = {"at": at, "kind": a.kind, "task": str(a.task)}
    if isinstance(a, DropHeartbeats):
        d["duration_ms"] = a.duration_ms
    elif isinstance(a, DelayAllocation):
        d["extra_ms"] = a.extra_ms
    elif isinstance(a, ChildExit):
        d.update(code=a.code, after_ms=a.after_ms)
    return d


def _child(d):
    return ChildBehavior(int(d.get("code", 0)), int(d.get("run_ms", settings.SIM_CHILD_RUN_MS)))


def parse_scenario(doc: Mapping) -> ScenarioScript:
    try:
        script = ScenarioScript(
            cluster=SimClusterConfig.from_dict(doc["cluster"]),
            job=_job_from_dict(doc["job"]),
            actions=tuple(_action_from_dict(a) for a in doc.get("actions", ())),
            default_child=_child(doc.get("default_child", {})),
            children={g: _child(c) for g, c in doc.get("children", {}).items()},
            recovery_order=doc.get("recovery_order", "release-first"),
            horizon_ms=int(doc.get("horizon_ms", settings.HORIZON_MS)),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ScenarioError(f"bad scenario: {err!r}") from err
    return validate_scenario(script)


def scenario_to_dict(script: ScenarioScript):
    return {
        "cluster": script.cluster.to_dict(),
        "job": _job_to_dict(script.job),
        "actions": [_action_to_dict(at, a) for at, a in script.actions],
        "default_child": {"code": script.default_child.code, "run_ms": script.default_child.run_ms},
        "children": {g: {"code": c.code, "run_ms": c.run_ms} for g, c in script.children.items()},
        "recovery_order": script.recovery_order,
        "horizon_ms": script.horizon_ms,
    }


def load_scenario(path) -> ScenarioScript:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as err:
        raise ScenarioError(f"cannot read scenario {path}: {err}") from err
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be an object")
    return parse_scenario(doc)


# running

def run_scenario(script: ScenarioScript, seed: int = 0, on_status: Optional[Callable] = None) -> Trace:
    """Drive master and simulated cluster to job termination or the horizon."""
    validate_scenario(script)
    sim = SimScheduler(script.cluster, seed=seed)
    sim.default_child = script.default_child
    sim.group_children = dict(script.children)
    trace = sim.trace
    master = Master(script.job, clock=sim.clock, trace=trace, master_addr="sim:0", recovery_order=script.recovery_order)
    runner = JobRunner(master, sim, Transport(sim.deliver), on_status=on_status)
    sim.attach(runner.handle)
    # stable: equal times keep their listed order
    for at, action in sorted(script.actions, key=lambda a: a[0]):
        sim.inject(at, action)
    sim.set_ticker(lambda now: runner.handle(Tick(now)))
    runner.start()
    while not master.finished:
        if sim.now >= script.horizon_ms:
            log.warning("horizon %d ms reached in state %s", script.horizon_ms, master.state.value)
            trace.finish(HORIZON_EXCEEDED)
            return trace
        sim.sim_step(min(sim.now + script.cluster.tick_ms, script.horizon_ms))
    trace.finish(master.state.value)
    return trace


@dataclass(frozen=True)
class ScenarioResult:
    index: int
    seed: int
    script: ScenarioScript
    trace: Trace
    violations: Tuple["Violation", ...]


def run_batch(scripts, seed: int = 0):
    results = []
    for i, script in enumerate(scripts):
        trace = run_scenario(script, seed + i)
        results.append(ScenarioResult(i, seed + i, script, trace, tuple(check_invariants(trace))))
    return results


# invariants

@dataclass(frozen=True)
class Violation:
    rule: str
    index: int
    detail: str


def check_invariants(trace, cadence_tolerance: float = 0.0):
    """Every trace-checkable protocol property; returns violations, never raises."""
    records = list(trace)
    out = []

    def flag(rule, i, detail):
        out.append(Violation(rule, i, detail))

    header = next((r for r in records if r.event == "job_submitted"), None)
    if header is None:
        flag("trace", 0, "no job_submitted record")
        return out
    total = sum(header.detail["groups"].values())
    max_attempts = header.detail["max_attempts"]
    interval = header.detail["heartbeat_ms"]
    cluster = next((r for r in records if r.event == "cluster"), None)
    capacity = {}
    if cluster is not None:
        capacity = {h: ResourceRequest(**c) for h, c in cluster.detail["hosts"].items()}
    used = {h: ZERO for h in capacity}

    current = 0
    attempt_at = {}
    requests = defaultdict(int)
    registered = defaultdict(set)
    live = defaultdict(set)
    spec_to = defaultdict(set)
    spec_recv = set()
    recovering = {}
    teardown_to = defaultdict(set)
    last_out = 0
    exits = defaultdict(int)
    beats = defaultdict(list)

    for i, r in enumerate(records):
        ev, d = r.event, r.detail
        if ev == "attempt":
            if r.attempt != current + 1:
                flag("monotone-attempts", i, f"attempt {r.attempt} follows {current}")
            if r.attempt > max_attempts:
                flag("monotone-attempts", i, f"attempt {r.attempt} exceeds max_attempts {max_attempts}")
            current = r.attempt
            attempt_at[current] = i
        elif ev == "request":
            requests[r.attempt] += 1
        elif ev == "task":
            if d["to"] == "REGISTERED":
                registered[r.attempt].add(r.subject)
            if d["to"] in ("REGISTERED", "RUNNING"):
                live[r.attempt].add(r.subject)
            else:
                live[r.attempt].discard(r.subject)
        elif ev == "job" and d["to"] == "RECOVERING":
            recovering[r.attempt] = (i, set(live[r.attempt]))
        elif ev == "msg_out":
            if r.attempt < last_out:
                flag("monotone-attempts", i, f"{d['type']} for attempt {r.attempt} after attempt {last_out}")
            last_out = max(last_out, r.attempt)
            if d["type"] == "SPEC":
                n = len(registered[r.attempt])
                if n < total:
                    flag("gang-start", i, f"SPEC to {r.subject} with {n}/{total} registered")
                if r.subject in spec_to[r.attempt]:
                    flag("single-broadcast", i, f"second SPEC to {r.subject} in attempt {r.attempt}")
                spec_to[r.attempt].add(r.subject)
            elif d["type"] == "TEARDOWN":
                teardown_to[r.attempt].add(r.subject)
        elif ev in ("msg_in", "msg_ignored", "msg_stale"):
            if ev == "msg_in" and r.attempt != current:
                flag("stale-silence", i, f"{d['type']} from attempt {r.attempt} accepted in attempt {current}")
            if d.get("type") == "HEARTBEAT":
                beats[(r.subject, r.attempt)].append((r.time, i))
        elif ev == "hb_dropped":
            beats[(r.subject, r.attempt)].append((r.time, i))
        elif ev == "spec_recv":
            spec_recv.add((r.subject, r.attempt))
        elif ev == "child_spawn":
            if (r.subject, r.attempt) not in spec_recv or r.subject not in spec_to[r.attempt]:
                flag("executor-gang-start", i, f"{r.subject} spawned its child before its SPEC")
        elif ev == "exec_exit":
            key = (r.subject, r.attempt)
            exits[key] += 1
            if exits[key] > 1:
                flag("single-termination", i, f"{r.subject} attempt {r.attempt} terminated twice")
            if d.get("reason") == "teardown" and d.get("exit_sent"):
                flag("single-termination", i, f"{r.subject} reported EXIT and was torn down")
        elif ev in ("alloc", "free") and d.get("host") in used:
            h = d["host"]
            res = ResourceRequest(d["memory_mb"], d["vcores"], d["gpus"])
            used[h] = used[h] + res if ev == "alloc" else used[h] - res
            if not used[h].fits_in(capacity[h]) or not ZERO.fits_in(used[h]):
                flag("capacity", i, f"{h} at {used[h].as_dict()} of {capacity[h].as_dict()}")
            if used[h].as_dict() != d.get("used"):
                flag("capacity", i, f"{h} reports {d.get('used')}, ledger says {used[h].as_dict()}")

    for a, n in requests.items():
        if n != total:
            flag("full-gang-recovery", attempt_at.get(a, 0), f"attempt {a} requested {n}/{total} containers")
    for a, (i, survivors) in recovering.items():
        missing = survivors - teardown_to[a]
        if missing:
            flag("full-gang-recovery", i, f"no TEARDOWN to {', '.join(sorted(missing))}")
    for (task, attempt), seen in beats.items():
        for (t0, _), (t1, j) in zip(seen, seen[1:]):
            if abs((t1 - t0) - interval) > cadence_tolerance * interval:
                flag("heartbeat-cadence", j, f"{task} attempt {attempt}: {t1 - t0} ms between heartbeats")
    return out


# scenario generation

def _default_cluster():
    return SimClusterConfig.uniform(16, ResourceRequest(8192, 8, 0), allocation_delay_ms=50, allocation_jitter_ms=200)


@dataclass(frozen=True)
class JobShapeBounds:
    max_groups: int = 4
    max_instances: int = 8
    resources: ResourceRequest = ResourceRequest(1024, 1, 0)
    cluster: SimClusterConfig = field(default_factory=_default_cluster)
    max_faults: int = 3
    fault_window_ms: int = 5000
    attempts: Tuple[int, int] = (1, 3)
    run_ms: Tuple[int, int] = (200, 3000)
    fault_kinds: Tuple[str, ...] = tuple(ACTIONS)
    recovery_order: str = "release-first"


def _first_fit(n, res: ResourceRequest, hosts) -> bool:
    used = {h.name: ZERO for h in hosts}
    for _ in range(n):
        host = next((h for h in hosts if (used[h.name] + res).fits_in(h.capacity)), None)
        if host is None:
            return False
        used[host.name] = used[host.name] + res
    return True


def check_bounds(bounds: JobShapeBounds):
    if bounds.max_groups < 1 or bounds.max_instances < 1:
        raise InfeasibleBounds("bounds need at least one group of one instance")
    lo, hi = bounds.attempts
    if not 1 <= lo <= hi:
        raise InfeasibleBounds(f"bad attempts range {bounds.attempts}")
    if not 0 < bounds.run_ms[0] <= bounds.run_ms[1]:
        raise InfeasibleBounds(f"bad run_ms range {bounds.run_ms}")
    unknown = set(bounds.fault_kinds) - set(ACTIONS)
    if unknown:
        raise InfeasibleBounds(f"unknown fault kinds {sorted(unknown)}")
    n = bounds.max_groups * bounds.max_instances
    if not _first_fit(n, bounds.resources, bounds.cluster.hosts):
        raise InfeasibleBounds(f"{n} tasks of {bounds.resources.as_dict()} do not fit the cluster at once")


def _group_names(n):
    return ["worker", "ps"][:n] + [f"aux{i}" for i in range(2, n)]


def random_scenarios(bounds: JobShapeBounds, count: int, seed: int):
    """``count`` scenarios drawn from ``bounds``; a pure function of (bounds, seed)."""
    check_bounds(bounds)
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for n in range(count):
        names = _group_names(int(rng.integers(1, bounds.max_groups + 1)))
        groups = tuple(
            TaskGroupSpec(
                name,
                int(rng.integers(1, bounds.max_instances + 1)),
                bounds.resources,
                tracked=name not in settings.UNTRACKED_GROUPS,
            )
            for name in names
        )
        job = JobSpec(
            job_name=f"random-{seed}-{n}",
            groups=groups,
            max_attempts=int(rng.integers(bounds.attempts[0], bounds.attempts[1] + 1)),
        )
        tasks = job.task_ids()
        actions = []
        for _ in range(int(rng.integers(0, bounds.max_faults + 1))):
            kind = bounds.fault_kinds[int(rng.integers(len(bounds.fault_kinds)))]
            task = tasks[int(rng.integers(len(tasks)))]
            at = int(rng.integers(0, bounds.fault_window_ms + 1))
            if kind == "kill_task":
                action = KillTask(task)
            elif kind == "drop_heartbeats":
                action = DropHeartbeats(task, int(rng.integers(500, 6001)))
            elif kind == "delay_allocation":
                action = DelayAllocation(task, int(rng.integers(0, 4001)))
            else:
                action = ChildExit(task, int(rng.choice([0, 1, 3])), int(rng.integers(50, bounds.run_ms[1] + 1)))
            actions.append((at, action))
        run_ms = int(rng.integers(bounds.run_ms[0], bounds.run_ms[1] + 1))
        out.append(
            ScenarioScript(
                cluster=bounds.cluster,
                job=job,
                actions=tuple(actions),
                default_child=ChildBehavior(0, run_ms),
                # parameter servers serve until torn down
                children={g: ChildBehavior(0, settings.HORIZON_MS) for g in settings.UNTRACKED_GROUPS if job.group(g)},
                recovery_order=bounds.recovery_order,
            )
        )
    return out
