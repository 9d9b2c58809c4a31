"""Deterministic in-process cluster.

A virtual clock and an event heap stand in for the resource manager, the
hosts and the executors. Events fire in (time, category, seq) order so a
run is a pure function of (config, scenario, seed). Messages between the
master and the simulated executors are delivered with zero latency through
an immediate FIFO that is drained after every heap event.
"""

import heapq
import logging
from bisect import insort
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Mapping, Optional, Tuple

import numpy as np

from orch import settings
from orch.backends.base import Allocated, ContainerExited, ContainerHandle, Disconnected, FrameReceived, Rejected, Scheduler
from orch.errors import DecodeError, HandleReleased, NoFreePort, ScenarioError
from orch.executor import ArmGrace, Bootstrap, ExecutorLifecycle, Finish, SendFrame, SpawnChild, StopChild
from orch.model import ZERO, ResourceRequest, TaskId
from orch.protocol import FrameBuffer, Heartbeat, Spec, decode, encode
from orch.trace import Trace

log = logging.getLogger(__name__)

EXIT_KILLED = 137


class Category(IntEnum):
    ALLOCATION = 0
    FAULT = 1
    CHILD = 2
    TICK = 3


@dataclass(frozen=True)
class SimHost:
    name: str
    capacity: ResourceRequest


@dataclass(frozen=True)
class SimClusterConfig:
    hosts: Tuple[SimHost, ...]
    allocation_delay_ms: int = 0
    seed: int = 0
    tick_ms: int = settings.TICK_MS
    allocation_jitter_ms: int = 0
    ports_per_host: int = settings.SIM_PORTS_PER_HOST
    queues: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.hosts:
            raise ScenarioError("cluster has no hosts")
        names = [h.name for h in self.hosts]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate host name")
        for h in self.hosts:
            c = h.capacity
            if c.memory_mb < 1 or c.vcores < 1 or c.gpus < 0:
                raise ScenarioError(f"host {h.name} needs memory_mb >= 1, vcores >= 1, gpus >= 0")
        if self.allocation_delay_ms < 0 or self.allocation_jitter_ms < 0:
            raise ScenarioError("allocation delays must be >= 0")
        if self.tick_ms < 1 or self.ports_per_host < 1:
            raise ScenarioError("tick_ms and ports_per_host must be >= 1")

    @classmethod
    def uniform(cls, count, capacity: ResourceRequest, **kwargs):
        return cls(hosts=tuple(SimHost(f"h{i}", capacity) for i in range(count)), **kwargs)

    @classmethod
    def from_dict(cls, d: Mapping):
        try:
            hosts = tuple(
                SimHost(h["name"], ResourceRequest(int(h["memory_mb"]), int(h["vcores"]), int(h.get("gpus", 0))))
                for h in d["hosts"]
            )
            return cls(
                hosts=hosts,
                allocation_delay_ms=int(d.get("allocation_delay_ms", 0)),
                seed=int(d.get("seed", 0)),
                tick_ms=int(d.get("tick_ms", settings.TICK_MS)),
                allocation_jitter_ms=int(d.get("allocation_jitter_ms", 0)),
                ports_per_host=int(d.get("ports_per_host", settings.SIM_PORTS_PER_HOST)),
                queues=tuple(d.get("queues", ())),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ScenarioError(f"bad cluster: {err!r}") from err

    def to_dict(self):
        return {
            "hosts": [{"name": h.name, **h.capacity.as_dict()} for h in self.hosts],
            "allocation_delay_ms": self.allocation_delay_ms,
            "seed": self.seed,
            "tick_ms": self.tick_ms,
            "allocation_jitter_ms": self.allocation_jitter_ms,
            "ports_per_host": self.ports_per_host,
            "queues": list(self.queues),
        }


@dataclass(frozen=True)
class ChildBehavior:
    code: int = 0
    run_ms: int = settings.SIM_CHILD_RUN_MS


# fault actions

@dataclass(frozen=True)
class KillTask:
    task: TaskId
    kind = "kill_task"


@dataclass(frozen=True)
class DropHeartbeats:
    task: TaskId
    duration_ms: int
    kind = "drop_heartbeats"


@dataclass(frozen=True)
class DelayAllocation:
    task: TaskId
    extra_ms: int
    kind = "delay_allocation"


@dataclass(frozen=True)
class ChildExit:
    """Script the exit of every child of ``task`` spawned from now on."""

    task: TaskId
    code: int
    after_ms: int
    kind = "child_exit"


@dataclass(frozen=True)
class SimEvent:
    time: int
    category: str
    name: str
    subject: str


class PortPool:
    def __init__(self, first=settings.SIM_FIRST_PORT, count=settings.SIM_PORTS_PER_HOST):
        self._free = list(range(first, first + count))

    def allocate(self) -> int:
        if not self._free:
            raise NoFreePort("port pool exhausted")
        return self._free.pop(0)

    def release(self, port):
        if port is not None and port not in self._free:
            insort(self._free, port)

    def __len__(self):
        return len(self._free)


@dataclass
class _Container:
    handle: ContainerHandle
    request: object
    due: int = 0
    gen: int = 0
    delivered: bool = False
    released: bool = False
    executor: Optional["SimExecutor"] = None


class SimExecutor:
    """A simulated executor process: the shared lifecycle plus a scripted child."""

    def __init__(self, sim: "SimScheduler", container: _Container, boot: Bootstrap):
        self.sim = sim
        self.container = container
        self.boot = boot
        self.life = ExecutorLifecycle(boot, base_env={})
        self.buffer = FrameBuffer()
        self.registered = False
        self.done = False
        self.port = None
        self.ui_port = None
        self.env = None
        self._child_gen = 0
        self._child_alive = False

    @property
    def task(self) -> TaskId:
        return self.boot.task

    @property
    def host(self) -> str:
        return self.container.handle.host

    def _trace(self, event, **detail):
        self.sim.trace.emit(event, attempt=self.boot.attempt, subject=self.task, **detail)

    def start(self):
        pool = self.sim.ports[self.host]
        try:
            self.port = pool.allocate()
            if self.boot.is_ui_task:
                self.ui_port = pool.allocate()
        except NoFreePort as err:
            self._trace("exec_error", error=str(err))
            self._finish(settings.EXIT_PROTOCOL, "no-free-port")
            return
        self._trace("exec_start", container=self.container.handle.id, host=self.host, port=self.port)
        self.registered = True
        self._apply(self.life.register(self.host, self.port, self.ui_port))
        self._schedule_beat()

    def _schedule_beat(self):
        self.sim.schedule(self.sim.now + self.boot.heartbeat_interval_ms, Category.TICK, "heartbeat", self.task, self._beat)

    def _beat(self):
        if self.done:
            return
        self._apply(self.life.heartbeat_due())
        if not self.done:
            self._schedule_beat()

    def receive(self, data: bytes):
        if self.done:
            return
        for frame in self.buffer.feed(data):
            try:
                msg = decode(frame)
            except DecodeError as err:
                log.warning("%s: bad frame from master: %s", self.task, err)
                continue
            if isinstance(msg, Spec) and msg.attempt == self.boot.attempt:
                self._trace("spec_recv")
            self._apply(self.life.message(msg))

    def _apply(self, effects):
        for e in effects:
            if self.done:
                return
            if isinstance(e, SendFrame):
                self.sim.to_master(self, e.msg)
            elif isinstance(e, SpawnChild):
                self._spawn(e)
            elif isinstance(e, StopChild):
                self._stop_child(e.force)
            elif isinstance(e, ArmGrace):
                self.sim.schedule(self.sim.now + e.ms, Category.TICK, "grace", self.task, self._grace)
            elif isinstance(e, Finish):
                self._finish(e.code, e.reason)

    def _spawn(self, e: SpawnChild):
        self.env = dict(e.env)
        behavior = self.sim.child_behavior(self.task)
        self._child_alive = True
        self._child_gen += 1
        gen = self._child_gen
        self._trace("child_spawn", run_ms=behavior.run_ms, code=behavior.code)
        self._apply(self.life.child_started())
        self.sim.schedule(
            self.sim.now + behavior.run_ms, Category.CHILD, "child_exit", self.task,
            lambda: self._child_exit(gen, behavior.code),
        )

    def _child_exit(self, gen, code):
        if self.done or gen != self._child_gen or not self._child_alive:
            return
        self._child_alive = False
        self._trace("child_exit", code=code)
        self._apply(self.life.child_exited(code))

    def _stop_child(self, force):
        if not self._child_alive:
            return
        self._child_gen += 1
        gen = self._child_gen
        code = EXIT_KILLED if force else settings.EXIT_TORN_DOWN
        if force:
            self._child_alive = False
            self._trace("child_exit", code=code)
            return
        # simulated children honor SIGTERM right away
        self.sim.schedule(self.sim.now, Category.CHILD, "child_exit", self.task, lambda: self._child_exit(gen, code))

    def _grace(self):
        if not self.done:
            self._apply(self.life.grace_expired())

    def kill(self, code=EXIT_KILLED):
        if self.done:
            return
        self._trace("exec_killed")
        self._child_alive = False
        self._finish(code, "killed")

    def _finish(self, code, reason):
        self.done = True
        self._trace("exec_exit", code=code, reason=reason, exit_sent=self.life.exit_sent)
        self.sim.executor_gone(self, code)


class SimScheduler(Scheduler):
    """Discrete-event stand-in for a resource manager and its hosts.

    Requests are placed strictly first-in first-out, first fit over hosts
    in configuration order; a request that fits nowhere right now blocks
    the ones behind it.
    """

    def __init__(self, config: SimClusterConfig, seed: Optional[int] = None):
        self.config = config
        self.now = 0
        self.trace = Trace(self.clock)
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.default_child = ChildBehavior()
        self.group_children = {}

        self.used = {h.name: ZERO for h in config.hosts}
        self.ports = {h.name: PortPool(settings.SIM_FIRST_PORT, config.ports_per_host) for h in config.hosts}

        self._heap = []
        self._seq = 0
        self._immediate = deque()
        self._pending = []
        self._containers = {}
        self._executors = {}
        self._delays = {}
        self._hb_drops = {}
        self._child_scripts = {}
        self._counter = 0

        self.trace.emit(
            "cluster",
            hosts={h.name: h.capacity.as_dict() for h in config.hosts},
            allocation_delay_ms=config.allocation_delay_ms,
            allocation_jitter_ms=config.allocation_jitter_ms,
            tick_ms=config.tick_ms,
            queues=list(config.queues),
            seed=config.seed if seed is None else seed,
        )

    def clock(self) -> int:
        return self.now

    # event loop

    def schedule(self, time, category: Category, name, subject, fn):
        heapq.heappush(self._heap, (time, int(category), self._seq, name, str(subject), fn))
        self._seq += 1

    def later(self, fn):
        self._immediate.append(fn)

    def _drain(self):
        while self._immediate:
            self._immediate.popleft()()

    def sim_step(self, until: int):
        """Process every event due at or before ``until``; returns what fired."""
        if until < self.now:
            raise ValueError(f"cannot step back from {self.now} to {until}")
        fired = []
        self._drain()
        while self._heap and self._heap[0][0] <= until:
            time, cat, _, name, subject, fn = heapq.heappop(self._heap)
            self.now = time
            fired.append(SimEvent(time, Category(cat).name.lower(), name, subject))
            fn()
            self._drain()
        self.now = until
        return fired

    def set_ticker(self, fn):
        """Call ``fn(now)`` every tick_ms, starting one tick from now."""

        def tick(t):
            fn(t)
            self.schedule(t + self.config.tick_ms, Category.TICK, "tick", "master", lambda: tick(t + self.config.tick_ms))

        first = self.now + self.config.tick_ms
        self.schedule(first, Category.TICK, "tick", "master", lambda: tick(first))

    # scheduler surface

    def request(self, reqs):
        for req in reqs:
            reason = self._infeasible(req)
            if reason:
                self.trace.emit("reject", attempt=req.attempt, subject=req.task, reason=reason)
                self.later(lambda req=req, reason=reason: self.emit(Rejected(req, reason)))
            else:
                self._pending.append(req)
        self._place()

    def _infeasible(self, req):
        queue = req.scheduler_config.get("queue", "default")
        if self.config.queues and queue not in self.config.queues:
            return f"unknown queue {queue!r}"
        if not any(req.resources.fits_in(h.capacity) for h in self.config.hosts):
            return f"no host can fit {req.resources.as_dict()}"
        return None

    def _place(self):
        while self._pending:
            req = self._pending[0]
            host = next(
                (h for h in self.config.hosts if (self.used[h.name] + req.resources).fits_in(h.capacity)),
                None,
            )
            if host is None:
                return
            self._pending.pop(0)
            self._counter += 1
            cid = f"c{self._counter:05d}"
            handle = ContainerHandle(
                cid, host.name, req.resources, log_link=f"sim://{host.name}/{cid}/{req.task.group}-{req.task.index}.log"
            )
            self.used[host.name] = self.used[host.name] + req.resources
            self.trace.emit(
                "alloc", attempt=req.attempt, subject=req.task, container=cid, host=host.name,
                **req.resources.as_dict(), used=self.used[host.name].as_dict(),
            )
            delay = self.config.allocation_delay_ms + self._delays.pop(req.task, 0)
            if self.config.allocation_jitter_ms:
                delay += int(self.rng.integers(0, self.config.allocation_jitter_ms + 1))
            c = _Container(handle, req, due=self.now + delay)
            self._containers[cid] = c
            self._schedule_delivery(c)

    def _schedule_delivery(self, c: _Container):
        c.gen += 1
        gen = c.gen
        self.schedule(c.due, Category.ALLOCATION, "allocated", c.request.task, lambda: self._deliver(c, gen))

    def _deliver(self, c: _Container, gen):
        if c.released or c.delivered or gen != c.gen:
            return
        c.delivered = True
        self.emit(Allocated(c.handle, c.request))

    def _free(self, c: _Container, reason):
        c.released = True
        host = c.handle.host
        self.used[host] = self.used[host] - c.handle.granted
        self.trace.emit(
            "free", attempt=c.request.attempt, subject=c.request.task, container=c.handle.id, host=host,
            reason=reason, **c.handle.granted.as_dict(), used=self.used[host].as_dict(),
        )

    def cancel(self, attempt: int):
        self._pending = [r for r in self._pending if r.attempt > attempt]
        for c in self._containers.values():
            if not c.delivered and not c.released and c.request.attempt <= attempt:
                self._free(c, "cancelled")
        self._place()

    def launch(self, handle: ContainerHandle, boot: Bootstrap):
        c = self._containers.get(handle.id)
        if c is None or c.released:
            raise HandleReleased(handle.id)
        ex = SimExecutor(self, c, boot)
        c.executor = ex
        self._executors[boot.task] = ex
        ex.start()
        return ex

    def release(self, handle: ContainerHandle):
        c = self._containers.get(handle.id)
        if c is None or c.released:
            log.info("container %s already released", handle.id)
            return
        if c.executor is not None:
            c.executor.kill()
        self._free(c, "released")
        self._place()

    # executor plumbing

    def child_behavior(self, task: TaskId) -> ChildBehavior:
        if task in self._child_scripts:
            return self._child_scripts[task]
        return self.group_children.get(task.group, self.default_child)

    def deliver(self, conn: SimExecutor, data: bytes):
        """Master to executor."""
        self.later(lambda: conn.receive(data))

    def to_master(self, ex: SimExecutor, msg):
        since, until = self._hb_drops.get(ex.task, (0, -1))
        # a heartbeat sent at the instant dropping starts still goes out
        if isinstance(msg, Heartbeat) and since < self.now < until:
            self.trace.emit("hb_dropped", attempt=msg.attempt, subject=ex.task)
            return
        frame = encode(msg)
        self.later(lambda: self.emit(FrameReceived(frame, ex)))

    def executor_gone(self, ex: SimExecutor, code):
        pool = self.ports[ex.host]
        pool.release(ex.port)
        pool.release(ex.ui_port)
        if ex.registered:
            self.later(lambda: self.emit(Disconnected(ex)))
        self.later(lambda: self.emit(ContainerExited(ex.container.handle, code)))

    # faults

    def inject(self, at: int, action):
        self.schedule(at, Category.FAULT, action.kind, action.task, lambda: self._fault(action))

    def _fault(self, a):
        if isinstance(a, KillTask):
            ex = self._executors.get(a.task)
            if ex is None or ex.done:
                self.trace.emit("fault", subject=a.task, kind=a.kind, effect="noop")
                return
            self.trace.emit("fault", attempt=ex.boot.attempt, subject=a.task, kind=a.kind, effect="killed")
            ex.kill()
        elif isinstance(a, DropHeartbeats):
            since, until = self._hb_drops.get(a.task, (0, -1))
            if until <= self.now:
                since = self.now
            until = max(until, self.now + a.duration_ms)
            self._hb_drops[a.task] = (since, until)
            self.trace.emit("fault", subject=a.task, kind=a.kind, effect="dropping", since=since, until=until)
        elif isinstance(a, DelayAllocation):
            waiting = [
                c for c in self._containers.values()
                if c.request.task == a.task and not c.delivered and not c.released
            ]
            if waiting:
                for c in waiting:
                    c.due += a.extra_ms
                    self._schedule_delivery(c)
                effect = "delayed"
            else:
                self._delays[a.task] = self._delays.get(a.task, 0) + a.extra_ms
                effect = "next"
            self.trace.emit("fault", subject=a.task, kind=a.kind, effect=effect, extra_ms=a.extra_ms)
        elif isinstance(a, ChildExit):
            self._child_scripts[a.task] = ChildBehavior(a.code, a.after_ms)
            self.trace.emit("fault", subject=a.task, kind=a.kind, effect="scripted", code=a.code, after_ms=a.after_ms)
        else:
            raise ScenarioError(f"unknown action {a!r}")
