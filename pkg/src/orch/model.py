"""Shared value types and state machines. No I/O happens here."""

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Tuple

from orch import settings
from orch.errors import IllegalTransition, InvalidJobSpec, InvariantViolation

GROUP_NAME = re.compile(r"[a-z][a-z0-9_]*")


def canonical_json(obj) -> bytes:
    """Sorted keys, no insignificant whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class ResourceRequest:
    memory_mb: int = settings.DEFAULT_MEMORY_MB
    vcores: int = settings.DEFAULT_VCORES
    gpus: int = settings.DEFAULT_GPUS

    def fits_in(self, other: "ResourceRequest") -> bool:
        return self.memory_mb <= other.memory_mb and self.vcores <= other.vcores and self.gpus <= other.gpus

    def __add__(self, other):
        return ResourceRequest(self.memory_mb + other.memory_mb, self.vcores + other.vcores, self.gpus + other.gpus)

    def __sub__(self, other):
        return ResourceRequest(self.memory_mb - other.memory_mb, self.vcores - other.vcores, self.gpus - other.gpus)

    def as_dict(self):
        return {"memory_mb": self.memory_mb, "vcores": self.vcores, "gpus": self.gpus}


ZERO = ResourceRequest(0, 0, 0)


@dataclass(frozen=True)
class TaskGroupSpec:
    name: str
    instances: int
    resources: ResourceRequest = ResourceRequest()
    tracked: bool = True


@dataclass(frozen=True, order=True)
class TaskId:
    group: str
    index: int

    def __str__(self):
        return f"{self.group}/{self.index}"

    @classmethod
    def parse(cls, text: str) -> "TaskId":
        group, _, index = text.partition("/")
        if not GROUP_NAME.fullmatch(group) or not index.isdigit():
            raise ValueError(f"bad task id: {text!r}")
        return cls(group, int(index))


@dataclass(frozen=True)
class JobSpec:
    job_name: str
    groups: Tuple[TaskGroupSpec, ...]
    command: Tuple[str, ...] = ()
    extra_env: Mapping[str, str] = field(default_factory=dict)
    archive_path: Optional[str] = None
    max_attempts: int = settings.MAX_ATTEMPTS
    heartbeat_interval_ms: int = settings.HEARTBEAT_MS
    heartbeat_miss_limit: int = settings.HEARTBEAT_MISS_LIMIT
    scheduler_config: Mapping[str, str] = field(default_factory=dict)
    teardown_grace_ms: int = settings.TEARDOWN_GRACE_MS

    def group(self, name: str) -> Optional[TaskGroupSpec]:
        return next((g for g in self.groups if g.name == name), None)

    def task_ids(self):
        return [TaskId(g.name, i) for g in self.groups for i in range(g.instances)]

    @property
    def total_instances(self) -> int:
        return sum(g.instances for g in self.groups)

    def has_task(self, task: TaskId) -> bool:
        g = self.group(task.group)
        return g is not None and 0 <= task.index < g.instances

    @property
    def ui_task(self) -> Optional[TaskId]:
        # index 0 of the first tracked group hosts the visualization port
        first = next((g for g in self.groups if g.tracked), None)
        return TaskId(first.name, 0) if first else None

    @property
    def heartbeat_timeout_ms(self) -> int:
        return self.heartbeat_interval_ms * self.heartbeat_miss_limit


def job_spec_errors(spec: JobSpec):
    errs = []
    seen = set()
    for g in spec.groups:
        if not GROUP_NAME.fullmatch(g.name or ""):
            errs.append(f"malformed group name: {g.name!r}")
        if g.name in seen:
            errs.append(f"duplicate group name: {g.name}")
        seen.add(g.name)
        if g.instances < 1:
            errs.append(f"zero instances: {g.name}")
        r = g.resources
        if r.memory_mb < 1:
            errs.append(f"memory_mb must be >= 1: {g.name}")
        if r.vcores < 1:
            errs.append(f"vcores must be >= 1: {g.name}")
        if r.gpus < 0:
            errs.append(f"gpus must be >= 0: {g.name}")
    if not spec.groups:
        errs.append("no groups")
    if not any(g.tracked for g in spec.groups):
        errs.append("no tracked group")
    if spec.max_attempts < 1:
        errs.append("max_attempts must be >= 1")
    if spec.heartbeat_interval_ms < 1:
        errs.append("heartbeat_interval_ms must be >= 1")
    if spec.heartbeat_miss_limit < 1:
        errs.append("heartbeat_miss_limit must be >= 1")
    if spec.teardown_grace_ms < 0:
        errs.append("teardown_grace_ms must be >= 0")
    return errs


def validate_job_spec(spec: JobSpec) -> JobSpec:
    """Return ``spec`` unchanged, or raise InvalidJobSpec listing every violation."""
    errs = job_spec_errors(spec)
    if errs:
        raise InvalidJobSpec(errs)
    return spec


def parse_endpoint(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise InvariantViolation(f"bad endpoint: {text!r}")
    p = int(port)
    if not 1 <= p <= 65535:
        raise InvariantViolation(f"port out of range: {text!r}")
    return host, p


@dataclass(frozen=True)
class ClusterSpec:
    endpoints: Mapping[str, Tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(self, "endpoints", {k: tuple(v) for k, v in self.endpoints.items()})

    def check(self, job: JobSpec):
        """Raise InvariantViolation unless this spec is dense and complete for ``job``."""
        if set(self.endpoints) != {g.name for g in job.groups}:
            raise InvariantViolation("cluster spec groups differ from job groups")
        for g in job.groups:
            if len(self.endpoints[g.name]) != g.instances:
                raise InvariantViolation(f"{g.name}: expected {g.instances} endpoints")
        self.check_endpoints()

    def check_endpoints(self):
        for eps in self.endpoints.values():
            for ep in eps:
                parse_endpoint(ep)


def canonical_spec_encoding(spec: ClusterSpec) -> bytes:
    return canonical_json({k: list(v) for k, v in spec.endpoints.items()})


def decode_cluster_spec(data) -> ClusterSpec:
    try:
        obj = json.loads(data)
    except ValueError as e:
        raise InvariantViolation(f"cluster spec is not a json object: {e}") from None
    if not isinstance(obj, dict) or not all(
        isinstance(v, list) and all(isinstance(ep, str) for ep in v) for v in obj.values()
    ):
        raise InvariantViolation("cluster spec must map group names to endpoint lists")
    spec = ClusterSpec(obj)
    spec.check_endpoints()
    return spec


class TaskStatus(str, Enum):
    REQUESTED = "REQUESTED"
    ALLOCATED = "ALLOCATED"
    REGISTERED = "REGISTERED"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    LOST = "LOST"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL


TERMINAL = frozenset({TaskStatus.SUCCEEDED, TaskStatus.FAILED, TaskStatus.LOST})
LIVE = frozenset({TaskStatus.REGISTERED, TaskStatus.RUNNING})


class TaskEvent(str, Enum):
    ALLOCATED = "allocated"
    REGISTERED = "registered"
    CHILD_STARTED = "child_started"
    EXITED_ZERO = "exited_zero"
    EXITED_NONZERO = "exited_nonzero"
    HEARTBEAT_LOST = "heartbeat_lost"


_TASK_TABLE = {
    (TaskStatus.REQUESTED, TaskEvent.ALLOCATED): TaskStatus.ALLOCATED,
    (TaskStatus.ALLOCATED, TaskEvent.REGISTERED): TaskStatus.REGISTERED,
    (TaskStatus.REGISTERED, TaskEvent.CHILD_STARTED): TaskStatus.RUNNING,
    (TaskStatus.RUNNING, TaskEvent.EXITED_ZERO): TaskStatus.SUCCEEDED,
    (TaskStatus.RUNNING, TaskEvent.EXITED_NONZERO): TaskStatus.FAILED,
    (TaskStatus.ALLOCATED, TaskEvent.HEARTBEAT_LOST): TaskStatus.LOST,
    (TaskStatus.REGISTERED, TaskEvent.HEARTBEAT_LOST): TaskStatus.LOST,
    (TaskStatus.RUNNING, TaskEvent.HEARTBEAT_LOST): TaskStatus.LOST,
}


def transition(current: TaskStatus, event: TaskEvent) -> TaskStatus:
    try:
        return _TASK_TABLE[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


class JobState(str, Enum):
    SUBMITTED = "SUBMITTED"
    ALLOCATING = "ALLOCATING"
    AWAITING_REGISTRATION = "AWAITING_REGISTRATION"
    RUNNING = "RUNNING"
    RECOVERING = "RECOVERING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"

    @property
    def terminal(self) -> bool:
        return self in (JobState.SUCCEEDED, JobState.FAILED)


_JOB_TABLE = {
    JobState.SUBMITTED: {JobState.ALLOCATING},
    # FAILED straight from ALLOCATING only on a scheduler rejection
    JobState.ALLOCATING: {JobState.AWAITING_REGISTRATION, JobState.RECOVERING, JobState.FAILED},
    JobState.AWAITING_REGISTRATION: {JobState.RUNNING, JobState.RECOVERING},
    JobState.RUNNING: {JobState.SUCCEEDED, JobState.RECOVERING},
    JobState.RECOVERING: {JobState.ALLOCATING, JobState.FAILED},
    JobState.SUCCEEDED: set(),
    JobState.FAILED: set(),
}


def job_transition(current: JobState, target: JobState) -> JobState:
    if target not in _JOB_TABLE[current]:
        raise ValueError(f"illegal job transition: {current.value} -> {target.value}")
    return target
