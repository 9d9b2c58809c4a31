from orch.backends.base import (
    Allocated,
    ContainerExited,
    ContainerHandle,
    ContainerRequest,
    Disconnected,
    FrameReceived,
    Rejected,
    Scheduler,
    Tick,
)

__all__ = [
    "Allocated",
    "ContainerExited",
    "ContainerHandle",
    "ContainerRequest",
    "Disconnected",
    "FrameReceived",
    "Rejected",
    "Scheduler",
    "Tick",
]
