"""Per-task supervisor.

The executor registers an endpoint with the master, waits for the cluster
spec of its own attempt, spawns the payload with the spec in its
environment, heartbeats, and reports the exit code. Its three concurrent
duties (reading the master connection, the heartbeat timer, waiting on the
child) only enqueue events; ExecutorLifecycle consumes them one at a time.
The simulated backend drives the same lifecycle with scripted children.
"""

import asyncio
import json
import logging
import os
import socket
import sys
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Tuple

from orch import logs, settings
from orch.errors import DecodeError, NoFreePort
from orch.model import ClusterSpec, TaskId, canonical_json, canonical_spec_encoding
from orch.protocol import ChildState, Exit, Heartbeat, Register, Spec, Teardown, decode, encode

log = logging.getLogger(__name__)

# bootstrap variables
MASTER_ADDR = "ORCH_MASTER_ADDR"
TASK_TYPE = "ORCH_TASK_TYPE"
TASK_INDEX = "ORCH_TASK_INDEX"
ATTEMPT = "ORCH_ATTEMPT"
HEARTBEAT_MS = "ORCH_HEARTBEAT_MS"
IS_UI_TASK = "ORCH_IS_UI_TASK"
CMD = "ORCH_CMD"
EXTRA_ENV = "ORCH_EXTRA_ENV"

# child variables
CLUSTER_SPEC = "ORCH_CLUSTER_SPEC"
RESERVED = (CLUSTER_SPEC, TASK_TYPE, TASK_INDEX, ATTEMPT)


@dataclass(frozen=True)
class Bootstrap:
    master_addr: str
    task: TaskId
    attempt: int
    heartbeat_interval_ms: int = settings.HEARTBEAT_MS
    command: Tuple[str, ...] = ()
    extra_env: Mapping[str, str] = field(default_factory=dict)
    is_ui_task: bool = False

    def to_env(self):
        return {
            MASTER_ADDR: self.master_addr,
            TASK_TYPE: self.task.group,
            TASK_INDEX: str(self.task.index),
            ATTEMPT: str(self.attempt),
            HEARTBEAT_MS: str(self.heartbeat_interval_ms),
            IS_UI_TASK: "true" if self.is_ui_task else "false",
            CMD: canonical_json(list(self.command)).decode("utf-8"),
            EXTRA_ENV: canonical_json(dict(self.extra_env)).decode("utf-8"),
        }

    @classmethod
    def from_env(cls, env: Mapping[str, str]) -> "Bootstrap":
        """Raises KeyError or ValueError when a variable is missing or malformed."""
        command = json.loads(env[CMD])
        extra = json.loads(env.get(EXTRA_ENV, "{}"))
        if not isinstance(command, list) or not all(isinstance(a, str) for a in command):
            raise ValueError(f"{CMD} must be an array of strings")
        if not isinstance(extra, dict):
            raise ValueError(f"{EXTRA_ENV} must be an object")
        return cls(
            master_addr=env[MASTER_ADDR],
            task=TaskId(env[TASK_TYPE], int(env[TASK_INDEX])),
            attempt=int(env[ATTEMPT]),
            heartbeat_interval_ms=int(env[HEARTBEAT_MS]),
            command=tuple(command),
            extra_env={str(k): str(v) for k, v in extra.items()},
            is_ui_task=env.get(IS_UI_TASK, "false") == "true",
        )


def build_child_env(spec: ClusterSpec, boot: Bootstrap, base_env: Optional[Mapping[str, str]] = None):
    env = dict(os.environ if base_env is None else base_env)
    for k, v in boot.extra_env.items():
        if k in RESERVED:
            log.warning("dropping reserved key from extra env: %s", k)
            continue
        env[k] = v
    env[CLUSTER_SPEC] = canonical_spec_encoding(spec).decode("utf-8")
    env[TASK_TYPE] = boot.task.group
    env[TASK_INDEX] = str(boot.task.index)
    env[ATTEMPT] = str(boot.attempt)
    return env


def allocate_port(host: str = "", candidates=None) -> int:
    """Bind, record and release a port so the child can bind it next.

    With ``candidates`` only those ports are tried, in order.
    """
    for port in (candidates if candidates is not None else [0]):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            try:
                s.bind((host, port))
            except OSError:
                continue
            return s.getsockname()[1]
    raise NoFreePort(f"no bindable port on {host or 'this host'}")


# lifecycle effects

@dataclass(frozen=True)
class SendFrame:
    msg: object


@dataclass(frozen=True)
class SpawnChild:
    command: Tuple[str, ...]
    env: Mapping[str, str]


@dataclass(frozen=True)
class StopChild:
    force: bool


@dataclass(frozen=True)
class ArmGrace:
    ms: int


@dataclass(frozen=True)
class Finish:
    code: int
    reason: str


class Phase(str, Enum):
    CONNECTING = "CONNECTING"
    AWAITING_SPEC = "AWAITING_SPEC"
    RUNNING = "RUNNING"
    TEARING_DOWN = "TEARING_DOWN"
    DONE = "DONE"


class ExecutorLifecycle:
    def __init__(self, boot: Bootstrap, base_env: Optional[Mapping[str, str]] = None):
        self.boot = boot
        self.base_env = base_env
        self.phase = Phase.CONNECTING
        self.child_state = ChildState.NOT_STARTED
        self.exit_sent = False

    @property
    def done(self):
        return self.phase == Phase.DONE

    def register(self, host, port, ui_port=None):
        if self.phase != Phase.CONNECTING:
            return []
        self.phase = Phase.AWAITING_SPEC
        ui = ui_port if self.boot.is_ui_task else None
        return [SendFrame(Register(self.boot.attempt, self.boot.task, host, port, ui))]

    def heartbeat_due(self):
        if self.phase not in (Phase.AWAITING_SPEC, Phase.RUNNING):
            return []
        return [SendFrame(Heartbeat(self.boot.attempt, self.boot.task, self.child_state))]

    def message(self, msg):
        if msg.attempt != self.boot.attempt:
            log.info("ignoring %s for attempt %d (mine is %d)", msg.type, msg.attempt, self.boot.attempt)
            return []
        if isinstance(msg, Spec):
            if self.phase != Phase.AWAITING_SPEC:
                return []
            self.phase = Phase.RUNNING
            env = build_child_env(msg.cluster_spec, self.boot, self.base_env)
            return [SpawnChild(tuple(self.boot.command), env)]
        if isinstance(msg, Teardown):
            return self._teardown(msg.grace_ms)
        log.warning("unexpected %s from master", msg.type)
        return []

    def _teardown(self, grace_ms):
        if self.phase in (Phase.TEARING_DOWN, Phase.DONE):
            return []
        if self.child_state == ChildState.RUNNING:
            self.phase = Phase.TEARING_DOWN
            return [StopChild(force=False), ArmGrace(grace_ms)]
        self.phase = Phase.DONE
        return [Finish(settings.EXIT_TORN_DOWN, "teardown")]

    def child_started(self):
        self.child_state = ChildState.RUNNING
        return []

    def spawn_failed(self, reason=""):
        log.error("spawn failed: %s", reason)
        return self._report_exit(settings.EXIT_SPAWN_FAILED, "spawn-failed")

    def child_exited(self, code):
        if self.phase == Phase.DONE:
            return []
        self.child_state = ChildState.EXITED
        if self.phase == Phase.TEARING_DOWN:
            self.phase = Phase.DONE
            return [Finish(settings.EXIT_TORN_DOWN, "teardown")]
        return self._report_exit(code, "exit")

    def _report_exit(self, code, reason):
        self.phase = Phase.DONE
        self.exit_sent = True
        return [SendFrame(Exit(self.boot.attempt, self.boot.task, code)), Finish(code, reason)]

    def grace_expired(self):
        if self.phase != Phase.TEARING_DOWN:
            return []
        self.phase = Phase.DONE
        return [StopChild(force=True), Finish(settings.EXIT_TORN_DOWN, "teardown")]

    def master_lost(self):
        if self.phase == Phase.DONE:
            return []
        running = self.child_state == ChildState.RUNNING
        self.phase = Phase.DONE
        return ([StopChild(force=True)] if running else []) + [Finish(settings.EXIT_PROTOCOL, "master-lost")]


def exit_code_of(returncode: int) -> int:
    # asyncio reports death by signal N as -N
    return 128 - returncode if returncode < 0 else returncode


class _ProcessDriver:
    def __init__(self, life: ExecutorLifecycle, reader, writer):
        self.life = life
        self.reader = reader
        self.writer = writer
        self.events = asyncio.Queue()
        self.child = None
        self.tasks = []

    async def run(self, host, port, ui_port):
        self.tasks.append(asyncio.create_task(self._read()))
        code = await self.apply(self.life.register(host, port, ui_port))
        self.tasks.append(asyncio.create_task(self._beat()))
        while code is None:
            kind, arg = await self.events.get()
            if kind == "msg":
                effects = self.life.message(arg)
            elif kind == "beat":
                effects = self.life.heartbeat_due()
            elif kind == "child_exit":
                effects = self.life.child_exited(arg)
            elif kind == "grace":
                effects = self.life.grace_expired()
            else:
                effects = self.life.master_lost()
            code = await self.apply(effects)
        for t in self.tasks:
            t.cancel()
        self.writer.close()
        return code

    async def apply(self, effects):
        for e in effects:
            if isinstance(e, SendFrame):
                try:
                    self.writer.write(encode(e.msg))
                    await self.writer.drain()
                except ConnectionError as err:
                    log.warning("send %s failed: %s", e.msg.type, err)
            elif isinstance(e, SpawnChild):
                code = await self._spawn(e)
                if code is not None:
                    return code
            elif isinstance(e, StopChild):
                self._stop(e.force)
            elif isinstance(e, ArmGrace):
                self.tasks.append(asyncio.create_task(self._later(e.ms / 1000, ("grace", None))))
            elif isinstance(e, Finish):
                log.info("executor done: %s (code %d)", e.reason, e.code)
                if e.reason != "exit":
                    self._stop(True)
                return e.code
        return None

    async def _spawn(self, e: SpawnChild):
        if not e.command:
            return await self.apply(self.life.spawn_failed("empty command"))
        try:
            self.child = await asyncio.create_subprocess_exec(*e.command, env=dict(e.env))
        except OSError as err:
            return await self.apply(self.life.spawn_failed(str(err)))
        log.info("child started: pid %d", self.child.pid)
        self.life.child_started()
        self.tasks.append(asyncio.create_task(self._wait_child()))
        return None

    def _stop(self, force):
        if self.child is None or self.child.returncode is not None:
            return
        try:
            self.child.kill() if force else self.child.terminate()
        except ProcessLookupError:
            pass

    async def _wait_child(self):
        rc = await self.child.wait()
        await self.events.put(("child_exit", exit_code_of(rc)))

    async def _read(self):
        try:
            while True:
                line = await self.reader.readline()
                if not line:
                    break
                try:
                    msg = decode(line)
                except DecodeError as err:
                    log.warning("bad frame from master: %s", err)
                    continue
                await self.events.put(("msg", msg))
        except ConnectionError:
            pass
        await self.events.put(("eof", None))

    async def _beat(self):
        while True:
            await asyncio.sleep(self.life.boot.heartbeat_interval_ms / 1000)
            await self.events.put(("beat", None))

    async def _later(self, delay, event):
        await asyncio.sleep(delay)
        await self.events.put(event)


async def connect(addr: str, tries=settings.CONNECT_TRIES, backoff_ms=settings.CONNECT_BACKOFF_MS):
    host, _, port = addr.rpartition(":")
    for i in range(tries):
        try:
            return await asyncio.open_connection(host, int(port))
        except OSError as err:
            log.warning("connect to %s failed (%d/%d): %s", addr, i + 1, tries, err)
            if i + 1 < tries:
                await asyncio.sleep(backoff_ms * 2 ** i / 1000)
    return None


async def run(boot: Bootstrap, base_env: Optional[Mapping[str, str]] = None) -> int:
    """Run one executor lifetime and return the executor's exit code."""
    try:
        port = allocate_port()
        ui_port = allocate_port() if boot.is_ui_task else None
    except NoFreePort as err:
        log.error("%s", err)
        return settings.EXIT_PROTOCOL
    conn = await connect(boot.master_addr)
    if conn is None:
        log.error("master unreachable at %s", boot.master_addr)
        return settings.EXIT_PROTOCOL
    reader, writer = conn
    host = writer.get_extra_info("sockname")[0]
    log.info("%s attempt %d on %s:%d", boot.task, boot.attempt, host, port)
    driver = _ProcessDriver(ExecutorLifecycle(boot, base_env), reader, writer)
    return await driver.run(host, port, ui_port)


def main():
    logs.setup(os.environ.get("ORCH_LOG_LEVEL", "INFO"))
    try:
        boot = Bootstrap.from_env(os.environ)
    except (KeyError, ValueError) as err:
        log.error("bad bootstrap environment: %s", err)
        sys.exit(settings.EXIT_PROTOCOL)
    sys.exit(asyncio.run(run(boot)))


if __name__ == "__main__":
    main()
