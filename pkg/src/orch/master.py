"""The job master.

A serialized state machine: every scheduler callback, decoded frame and
timer tick is handed to one method at a time. Methods never perform I/O;
they queue directives (Request, Cancel, Launch, Release, Send) that the
runtime drains with ``take_directives`` and executes against the scheduler
and the executor connections.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Tuple

from orch import settings
from orch.backends.base import ContainerHandle, ContainerRequest
from orch.errors import InvariantViolation
from orch.executor import Bootstrap
from orch.model import (
    LIVE,
    ClusterSpec,
    JobSpec,
    JobState,
    TaskEvent,
    TaskId,
    TaskStatus,
    canonical_spec_encoding,
    job_transition,
    parse_endpoint,
    transition,
    validate_job_spec,
)
from orch.protocol import ChildState, Exit, Heartbeat, Register, Spec, Teardown
from orch.trace import Trace

log = logging.getLogger(__name__)

ACTIVE = (JobState.ALLOCATING, JobState.AWAITING_REGISTRATION, JobState.RUNNING)


# directives

@dataclass(frozen=True)
class Request:
    requests: Tuple[ContainerRequest, ...]


@dataclass(frozen=True)
class Cancel:
    attempt: int


@dataclass(frozen=True)
class Launch:
    container: ContainerHandle
    boot: Bootstrap


@dataclass(frozen=True)
class Release:
    container: ContainerHandle


@dataclass(frozen=True)
class Send:
    task: TaskId
    msg: object


@dataclass(frozen=True)
class LivenessEvent:
    task: TaskId
    attempt: int
    silent_ms: int


@dataclass
class TaskRecord:
    task: TaskId
    status: TaskStatus = TaskStatus.REQUESTED
    container: Optional[ContainerHandle] = None
    endpoint: Optional[str] = None
    ui_port: Optional[int] = None
    last_heartbeat_at: Optional[int] = None
    exit_code: Optional[int] = None


@dataclass(frozen=True)
class TaskView:
    task: TaskId
    status: TaskStatus
    endpoint: Optional[str] = None


@dataclass(frozen=True)
class JobStatusSnapshot:
    state: JobState
    attempt: int
    tasks: Tuple[TaskView, ...]
    ui_url: Optional[str]
    log_links: Mapping[TaskId, str]
    diagnostics: Tuple[str, ...]


def build_cluster_spec(records) -> ClusterSpec:
    """Place every endpoint at its task index; arrival order does not matter."""
    groups = {}
    for r in records:
        groups.setdefault(r.task.group, {})[r.task.index] = r.endpoint
    return ClusterSpec({g: tuple(eps[i] for i in sorted(eps)) for g, eps in groups.items()})


class Master:
    def __init__(
        self,
        spec: JobSpec,
        clock: Callable[[], int] = lambda: 0,
        trace: Optional[Trace] = None,
        master_addr: str = "",
        recovery_order: str = "release-first",
    ):
        if recovery_order not in settings.RECOVERY_ORDERS:
            raise ValueError(f"unknown recovery order: {recovery_order}")
        self.spec = validate_job_spec(spec)
        self.clock = clock
        self.trace = trace if trace is not None else Trace(clock)
        self.master_addr = master_addr
        self.recovery_order = recovery_order

        self.state = JobState.SUBMITTED
        self.attempt = 0
        self.records = {}
        self.ui_url = None
        self.log_links = {}
        self.diagnostics = []

        self._outbox = []
        self._containers = {}  # id -> (handle, task, attempt)
        self._draining = []  # [deadline, [container ids], relaunch]
        self._recovery_started = False
        self._broadcast_sent = False

        self.trace.emit(
            "job_submitted",
            job=spec.job_name,
            groups={g.name: g.instances for g in spec.groups},
            tracked=[g.name for g in spec.groups if g.tracked],
            max_attempts=spec.max_attempts,
            heartbeat_ms=spec.heartbeat_interval_ms,
            miss_limit=spec.heartbeat_miss_limit,
            grace_ms=spec.teardown_grace_ms,
            recovery_order=recovery_order,
            scheduler_config=dict(spec.scheduler_config),
        )

    # plumbing

    def take_directives(self):
        out, self._outbox = self._outbox, []
        return out

    @property
    def finished(self) -> bool:
        return self.state.terminal and not self._draining

    def _emit(self, d):
        self._outbox.append(d)
        return d

    def _set_state(self, target: JobState, reason=""):
        prev = self.state
        self.state = job_transition(prev, target)
        log.info("job %s -> %s (%s)", prev.value, target.value, reason)
        self.trace.emit("job", attempt=self.attempt, reason=reason, **{"from": prev.value, "to": target.value})

    def _set_task(self, rec: TaskRecord, event: TaskEvent, reason=""):
        prev = rec.status
        rec.status = transition(prev, event)
        if rec.status == TaskStatus.LOST:
            rec.endpoint = None
        self.trace.emit(
            "task",
            attempt=self.attempt,
            subject=rec.task,
            event_name=event.value,
            reason=reason,
            **{"from": prev.value, "to": rec.status.value},
        )

    def _send(self, task: TaskId, msg):
        self.trace.emit("msg_out", attempt=msg.attempt, subject=task, type=msg.type)
        return self._emit(Send(task, msg))

    def _note(self, text):
        log.warning("%s", text)
        self.diagnostics.append(text)
        self.trace.emit("diagnostic", attempt=self.attempt, text=text)

    # attempts

    def start(self):
        """Issue one container request per task instance; returns the requests."""
        self._set_state(JobState.ALLOCATING, "submitted")
        return self._begin_attempt()

    def _begin_attempt(self):
        self.attempt += 1
        self._recovery_started = False
        self._broadcast_sent = False
        self.ui_url = None
        self.records = {t: TaskRecord(t) for t in self.spec.task_ids()}
        self.trace.emit("attempt", attempt=self.attempt, tasks=len(self.records))
        reqs = []
        for t in self.records:
            res = self.spec.group(t.group).resources
            reqs.append(ContainerRequest(t, res, self.attempt, dict(self.spec.scheduler_config)))
            self.trace.emit("request", attempt=self.attempt, subject=t, **res.as_dict())
        self._emit(Request(tuple(reqs)))
        return reqs

    def _tracked_done(self):
        tracked = {g.name for g in self.spec.groups if g.tracked}
        return all(r.status == TaskStatus.SUCCEEDED for r in self.records.values() if r.task.group in tracked)

    def _teardown_live(self):
        for rec in self.records.values():
            if rec.status in LIVE:
                self._send(rec.task, Teardown(self.attempt, self.spec.teardown_grace_ms))

    def _drain_all(self, relaunch=False):
        ids = list(self._containers)
        self._draining.append([self.clock() + self.spec.teardown_grace_ms, ids, relaunch])

    def _release(self, cid):
        entry = self._containers.pop(cid, None)
        if entry is None:
            return
        handle, task, attempt = entry
        self.trace.emit("release", attempt=attempt, subject=task, container=cid)
        self._emit(Release(handle))

    def _release_due(self, now):
        due = [d for d in self._draining if d[0] <= now]
        if not due:
            return
        self._draining = [d for d in self._draining if d[0] > now]
        for _, ids, relaunch in due:
            for cid in ids:
                self._release(cid)
            if relaunch and self.state == JobState.RECOVERING:
                self._set_state(JobState.ALLOCATING, "relaunch")
                self._begin_attempt()

    # scheduler callbacks

    def on_allocated(self, container: ContainerHandle, task: TaskId, attempt: int) -> Optional[Launch]:
        if attempt != self.attempt or self.state != JobState.ALLOCATING:
            return self._refuse(container, task, attempt, "stale allocation")
        rec = self.records.get(task)
        if rec is None:
            return self._refuse(container, task, attempt, "unknown task")
        if rec.status != TaskStatus.REQUESTED:
            return self._refuse(container, task, attempt, "duplicate allocation")
        self._containers[container.id] = (container, task, attempt)
        rec.container = container
        self.log_links[task] = container.log_link
        self._set_task(rec, TaskEvent.ALLOCATED, container.id)
        boot = Bootstrap(
            master_addr=self.master_addr,
            task=task,
            attempt=attempt,
            heartbeat_interval_ms=self.spec.heartbeat_interval_ms,
            command=tuple(self.spec.command),
            extra_env=dict(self.spec.extra_env),
            is_ui_task=task == self.spec.ui_task,
        )
        launch = self._emit(Launch(container, boot))
        if all(r.status != TaskStatus.REQUESTED for r in self.records.values()):
            self._set_state(JobState.AWAITING_REGISTRATION, "all containers allocated")
        return launch

    def _refuse(self, container, task, attempt, why):
        log.warning("releasing container %s for %s: %s", container.id, task, why)
        self.trace.emit("alloc_refused", attempt=attempt, subject=task, container=container.id, reason=why)
        self._emit(Release(container))
        return None

    def on_rejected(self, task: TaskId, attempt: int, reason: str):
        if attempt != self.attempt or self.state != JobState.ALLOCATING:
            log.info("ignoring rejection of %s (attempt %d)", task, attempt)
            return
        self._note(f"scheduler rejected {task}: {reason}")
        self._set_state(JobState.FAILED, "scheduler rejected")
        self._teardown_live()
        self._emit(Cancel(self.attempt))
        self._drain_all()

    def on_container_exited(self, container_id: str, code: int):
        entry = self._containers.get(container_id)
        if entry is None:
            return
        _, task, attempt = entry
        self.trace.emit("container_exit", attempt=attempt, subject=task, container=container_id, code=code)
        if attempt != self.attempt or self.state not in ACTIVE:
            return
        rec = self.records[task]
        # registered executors are covered by their connection and heartbeats
        if rec.status == TaskStatus.ALLOCATED:
            self._set_task(rec, TaskEvent.HEARTBEAT_LOST, f"executor exited with code {code} before registering")
            self._note(f"{task} executor died before registering (attempt {attempt})")
            self.recover()

    # executor traffic

    def on_message(self, msg):
        if isinstance(msg, Register):
            return self.on_register(msg)
        if isinstance(msg, Heartbeat):
            return self.on_heartbeat(msg)
        if isinstance(msg, Exit):
            return self.on_exit(msg)
        log.warning("executor sent master-only message %s", msg.type)
        return None

    def _accept(self, msg, **detail) -> Optional[TaskRecord]:
        if msg.attempt != self.attempt:
            log.info("dropping stale %s from %s (attempt %d, current %d)", msg.type, msg.task, msg.attempt, self.attempt)
            self.trace.emit("msg_stale", attempt=msg.attempt, subject=msg.task, type=msg.type, current=self.attempt)
            return None
        if self.state not in ACTIVE:
            self.trace.emit("msg_ignored", attempt=msg.attempt, subject=msg.task, type=msg.type, state=self.state.value)
            return None
        rec = self.records.get(msg.task)
        if rec is None:
            log.warning("%s from unknown task %s", msg.type, msg.task)
            self.trace.emit("msg_unknown", attempt=msg.attempt, subject=msg.task, type=msg.type)
            return None
        self.trace.emit("msg_in", attempt=msg.attempt, subject=msg.task, type=msg.type, **detail)
        return rec

    def on_register(self, msg: Register):
        """Record the endpoint; returns the SPEC sends when this was the last registration."""
        rec = self._accept(msg, host=msg.host, port=msg.port, ui_port=msg.ui_port)
        if rec is None:
            return []
        if rec.status != TaskStatus.ALLOCATED:
            self._note(f"protocol violation: REGISTER from {msg.task} in status {rec.status.value}")
            self.recover()
            return []
        endpoint = f"{msg.host}:{msg.port}"
        try:
            parse_endpoint(endpoint)
        except InvariantViolation as err:
            self._note(f"protocol violation: REGISTER from {msg.task}: {err.detail}")
            self.recover()
            return []
        rec.endpoint = endpoint
        rec.ui_port = msg.ui_port
        rec.last_heartbeat_at = self.clock()
        self._set_task(rec, TaskEvent.REGISTERED, rec.endpoint)
        if msg.ui_port is not None and msg.task == self.spec.ui_task:
            self.ui_url = f"http://{msg.host}:{msg.ui_port}"
            self.trace.emit("ui_url", attempt=self.attempt, subject=msg.task, url=self.ui_url)
        if not self._broadcast_sent and all(r.status == TaskStatus.REGISTERED for r in self.records.values()):
            return self._broadcast()
        return []

    def _broadcast(self):
        cs = build_cluster_spec(self.records.values())
        cs.check(self.spec)
        self._broadcast_sent = True
        self.trace.emit("broadcast", attempt=self.attempt, cluster_spec=canonical_spec_encoding(cs).decode("utf-8"))
        sends = [self._send(t, Spec(self.attempt, cs)) for t in self.records]
        self._set_state(JobState.RUNNING, "cluster spec broadcast")
        return sends

    def on_heartbeat(self, msg: Heartbeat):
        rec = self._accept(msg, child_state=msg.child_state.value)
        if rec is None or rec.status not in LIVE:
            return
        rec.last_heartbeat_at = self.clock()
        if msg.child_state == ChildState.RUNNING and rec.status == TaskStatus.REGISTERED:
            self._set_task(rec, TaskEvent.CHILD_STARTED)

    def on_exit(self, msg: Exit) -> JobState:
        rec = self._accept(msg, code=msg.code)
        if rec is None:
            return self.state
        if rec.status == TaskStatus.REGISTERED:
            self._set_task(rec, TaskEvent.CHILD_STARTED, "implied by exit")
        if rec.status != TaskStatus.RUNNING:
            log.warning("exit from %s in status %s", msg.task, rec.status.value)
            return self.state
        rec.exit_code = msg.code
        if msg.code == 0:
            self._set_task(rec, TaskEvent.EXITED_ZERO)
            if self._tracked_done():
                self._set_state(JobState.SUCCEEDED, "tracked groups finished")
                self._teardown_live()
                self._drain_all()
        else:
            self._set_task(rec, TaskEvent.EXITED_NONZERO, f"code {msg.code}")
            self._note(f"{msg.task} exited with code {msg.code} (attempt {self.attempt})")
            self.recover()
        return self.state

    def on_disconnect(self, task: TaskId, attempt: int):
        if attempt != self.attempt or self.state not in ACTIVE:
            return
        rec = self.records.get(task)
        if rec is not None and rec.status in LIVE:
            self._set_task(rec, TaskEvent.HEARTBEAT_LOST, "connection closed")
            self._note(f"{task} lost its master connection (attempt {attempt})")
            self.recover()

    # liveness and recovery

    def tick(self, now: int):
        """Mark silent tasks LOST and release containers whose grace ran out."""
        events = []
        if self.state in ACTIVE:
            limit = self.spec.heartbeat_timeout_ms
            for rec in self.records.values():
                if rec.status in LIVE and rec.last_heartbeat_at is not None and now - rec.last_heartbeat_at > limit:
                    silent = now - rec.last_heartbeat_at
                    self._set_task(rec, TaskEvent.HEARTBEAT_LOST, f"silent for {silent} ms")
                    events.append(LivenessEvent(rec.task, self.attempt, silent))
            if events:
                self._note(f"heartbeat lost: {', '.join(str(e.task) for e in events)} (attempt {self.attempt})")
                self.recover()
        self._release_due(now)
        return events

    def recover(self):
        """Tear down the gang and relaunch it whole, or fail once attempts run out."""
        if self._recovery_started or self.state not in ACTIVE:
            return []
        self._recovery_started = True
        mark = len(self._outbox)
        bad = [str(r.task) for r in self.records.values() if r.status in (TaskStatus.FAILED, TaskStatus.LOST)]
        self._set_state(JobState.RECOVERING, "failed: " + (", ".join(bad) or "protocol violation"))
        self._teardown_live()
        self._emit(Cancel(self.attempt))
        if self.attempt < self.spec.max_attempts:
            if self.recovery_order == "request-first":
                self._drain_all()
                self._set_state(JobState.ALLOCATING, "relaunch")
                self._begin_attempt()
            else:
                self._drain_all(relaunch=True)
        else:
            self._note(
                f"attempts exhausted ({self.attempt}/{self.spec.max_attempts}); "
                f"failed tasks: {', '.join(bad) or 'none'}"
            )
            self._set_state(JobState.FAILED, "attempts exhausted")
            self._drain_all()
        return self._outbox[mark:]

    def status(self) -> JobStatusSnapshot:
        return JobStatusSnapshot(
            state=self.state,
            attempt=self.attempt,
            tasks=tuple(TaskView(r.task, r.status, r.endpoint) for r in self.records.values()),
            ui_url=self.ui_url,
            log_links=dict(self.log_links),
            diagnostics=tuple(self.diagnostics),
        )
