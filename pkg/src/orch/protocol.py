"""Master <-> executor messages.

One frame is one canonical JSON object terminated by a newline. Every frame
carries ``attempt`` so a receiver can drop stale traffic without context.
"""

import json
from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Optional, Union

from orch.errors import InvariantViolation, MalformedFrame, MissingField, UnknownType
from orch.model import (
    GROUP_NAME,
    ClusterSpec,
    TaskId,
    canonical_json,
    canonical_spec_encoding,
    decode_cluster_spec,
    parse_endpoint,
)


class ChildState(str, Enum):
    NOT_STARTED = "NOT_STARTED"
    RUNNING = "RUNNING"
    EXITED = "EXITED"


@dataclass(frozen=True)
class Register:
    type: ClassVar[str] = "REGISTER"
    attempt: int
    task: TaskId
    host: str
    port: int
    ui_port: Optional[int] = None


@dataclass(frozen=True)
class Spec:
    type: ClassVar[str] = "SPEC"
    attempt: int
    cluster_spec: ClusterSpec


@dataclass(frozen=True)
class Heartbeat:
    type: ClassVar[str] = "HEARTBEAT"
    attempt: int
    task: TaskId
    child_state: ChildState


@dataclass(frozen=True)
class Exit:
    type: ClassVar[str] = "EXIT"
    attempt: int
    task: TaskId
    code: int


@dataclass(frozen=True)
class Teardown:
    type: ClassVar[str] = "TEARDOWN"
    attempt: int
    grace_ms: int


Message = Union[Register, Spec, Heartbeat, Exit, Teardown]
TYPES = {cls.type: cls for cls in (Register, Spec, Heartbeat, Exit, Teardown)}


def to_dict(msg: Message) -> dict:
    d = {"type": msg.type, "attempt": msg.attempt}
    if isinstance(msg, Register):
        d.update(task=_task_obj(msg.task), host=msg.host, port=msg.port)
        if msg.ui_port is not None:
            d["ui_port"] = msg.ui_port
    elif isinstance(msg, Spec):
        d["cluster_spec"] = canonical_spec_encoding(msg.cluster_spec).decode("utf-8")
    elif isinstance(msg, Heartbeat):
        d.update(task=_task_obj(msg.task), child_state=msg.child_state.value)
    elif isinstance(msg, Exit):
        d.update(task=_task_obj(msg.task), code=msg.code)
    elif isinstance(msg, Teardown):
        d["grace_ms"] = msg.grace_ms
    return d


def encode(msg: Message) -> bytes:
    return canonical_json(to_dict(msg)) + b"\n"


def decode(frame: bytes) -> Message:
    body = frame[:-1] if frame.endswith(b"\n") else frame
    if b"\n" in body:
        raise MalformedFrame("frame holds more than one line")
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedFrame(str(e)) from None
    if not isinstance(obj, dict):
        raise MalformedFrame("frame is not an object")
    if "type" not in obj:
        raise MissingField("type")
    kind = obj["type"]
    if kind not in TYPES:
        raise UnknownType(kind)

    attempt = _int(obj, "attempt")
    if attempt < 1:
        raise InvariantViolation(f"attempt must be >= 1, got {attempt}")
    if "ui_port" in obj and kind != Register.type:
        raise InvariantViolation("ui_port is only allowed on REGISTER")

    if kind == Register.type:
        port = _int(obj, "port")
        _check_port("port", port)
        ui_port = None
        if "ui_port" in obj:
            ui_port = _int(obj, "ui_port")
            _check_port("ui_port", ui_port)
        host = _str(obj, "host")
        parse_endpoint(f"{host}:{port}")
        return Register(attempt, _task(obj), host, port, ui_port)
    if kind == Spec.type:
        return Spec(attempt, decode_cluster_spec(_str(obj, "cluster_spec")))
    if kind == Heartbeat.type:
        raw = _str(obj, "child_state")
        try:
            state = ChildState(raw)
        except ValueError:
            raise InvariantViolation(f"unknown child_state: {raw!r}") from None
        return Heartbeat(attempt, _task(obj), state)
    if kind == Exit.type:
        return Exit(attempt, _task(obj), _int(obj, "code"))
    grace = _int(obj, "grace_ms")
    if grace < 0:
        raise InvariantViolation(f"grace_ms must be >= 0, got {grace}")
    return Teardown(attempt, grace)


class FrameBuffer:
    """Reassembles newline frames from arbitrary chunks of a byte stream."""

    def __init__(self):
        self._buf = b""

    def feed(self, data: bytes):
        self._buf += data
        *frames, self._buf = self._buf.split(b"\n")
        return [f + b"\n" for f in frames]

    @property
    def pending(self) -> bytes:
        return self._buf


def _task_obj(task: TaskId):
    return {"group": task.group, "index": task.index}


def _field(obj, name):
    if name not in obj:
        raise MissingField(name)
    return obj[name]


def _int(obj, name) -> int:
    v = _field(obj, name)
    # bool is an int subclass; reject it explicitly
    if type(v) is not int:
        raise InvariantViolation(f"{name} must be an integer")
    return v


def _str(obj, name) -> str:
    v = _field(obj, name)
    if not isinstance(v, str):
        raise InvariantViolation(f"{name} must be a string")
    return v


def _task(obj) -> TaskId:
    t = _field(obj, "task")
    if not isinstance(t, dict):
        raise InvariantViolation("task must be an object")
    group = _str(t, "group")
    index = _int(t, "index")
    if not GROUP_NAME.fullmatch(group) or index < 0:
        raise InvariantViolation(f"bad task id: {group}/{index}")
    return TaskId(group, index)


def _check_port(name, port):
    if not 1 <= port <= 65535:
        raise InvariantViolation(f"{name} out of range: {port}")
