from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from orch.model import ResourceRequest, TaskId


@dataclass(frozen=True)
class ContainerRequest:
    task: TaskId
    resources: ResourceRequest
    attempt: int
    scheduler_config: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ContainerHandle:
    id: str
    host: str
    granted: ResourceRequest
    log_link: str = ""


# events a backend (or the master's listener) feeds into the master loop

@dataclass(frozen=True)
class Allocated:
    container: ContainerHandle
    request: ContainerRequest


@dataclass(frozen=True)
class Rejected:
    request: ContainerRequest
    reason: str


@dataclass(frozen=True)
class ContainerExited:
    container: ContainerHandle
    code: int


@dataclass(frozen=True)
class FrameReceived:
    frame: bytes
    conn: Any


@dataclass(frozen=True)
class Disconnected:
    conn: Any


@dataclass(frozen=True)
class Tick:
    now: int


class Scheduler(ABC):
    """Container negotiation surface the master drives.

    Allocations, rejections and container exits come back later through the
    sink passed to ``attach``; nothing calls into the master directly.
    """

    sink: Optional[Callable[[Any], None]] = None

    def attach(self, sink):
        self.sink = sink

    def emit(self, event):
        if self.sink is not None:
            self.sink(event)

    @abstractmethod
    def request(self, reqs):
        ...

    @abstractmethod
    def cancel(self, attempt: int):
        """Drop outstanding requests of ``attempt`` and earlier."""

    @abstractmethod
    def launch(self, handle: ContainerHandle, boot):
        ...

    @abstractmethod
    def release(self, handle: ContainerHandle):
        ...

    def shutdown(self):
        pass
