"""Event dispatch shared by the simulated and the local backend.

Backends, connections and timers only produce events; JobRunner hands each
one to the master and executes the directives the master queued in reply.
"""

import logging
from collections import deque
from typing import Callable, Optional

from orch import settings
from orch.backends.base import Allocated, ContainerExited, Disconnected, FrameReceived, Rejected, Tick
from orch.errors import DecodeError, SchedulerError
from orch.master import Cancel, Launch, Master, Release, Request, Send
from orch.protocol import Register, decode, encode

log = logging.getLogger(__name__)


class Transport:
    """Routes master sends to the connection bound to (task, attempt)."""

    def __init__(self, write: Callable):
        self._write = write
        self._by_task = {}
        self._by_conn = {}

    def bind(self, conn, task, attempt):
        old = self._by_conn.get(conn)
        if old is not None and old[0] != task:
            self._by_task.pop(old[0], None)
        self._by_task[task] = (attempt, conn)
        self._by_conn[conn] = (task, attempt)

    def unbind(self, conn):
        bound = self._by_conn.pop(conn, None)
        if bound is not None and self._by_task.get(bound[0], (None, None))[1] is conn:
            del self._by_task[bound[0]]
        return bound

    def send(self, task, msg) -> bool:
        entry = self._by_task.get(task)
        if entry is None or entry[0] != msg.attempt:
            log.debug("no connection for %s attempt %d, dropping %s", task, msg.attempt, msg.type)
            return False
        self._write(entry[1], encode(msg))
        return True


class JobRunner:
    def __init__(self, master: Master, scheduler, transport: Transport, on_status: Optional[Callable] = None):
        self.master = master
        self.scheduler = scheduler
        self.transport = transport
        self.on_status = on_status

    def start(self):
        self.master.start()
        self.apply(self.master.take_directives())
        self._status()

    def handle(self, event):
        m = self.master
        if isinstance(event, Allocated):
            m.on_allocated(event.container, event.request.task, event.request.attempt)
        elif isinstance(event, Rejected):
            m.on_rejected(event.request.task, event.request.attempt, event.reason)
        elif isinstance(event, ContainerExited):
            m.on_container_exited(event.container.id, event.code)
        elif isinstance(event, FrameReceived):
            self._frame(event)
        elif isinstance(event, Disconnected):
            bound = self.transport.unbind(event.conn)
            if bound is not None:
                m.on_disconnect(*bound)
        elif isinstance(event, Tick):
            m.tick(event.now)
        else:
            log.warning("unknown event %r", event)
        self.apply(m.take_directives())
        self._status()

    def _frame(self, event):
        try:
            msg = decode(event.frame)
        except DecodeError as err:
            log.warning("bad frame: %s", err)
            self.master.trace.emit("frame_rejected", error=type(err).__name__, text=str(err))
            return
        if isinstance(msg, Register) and msg.attempt == self.master.attempt:
            self.transport.bind(event.conn, msg.task, msg.attempt)
        self.master.on_message(msg)

    def apply(self, directives):
        pending = deque(directives)
        while pending:
            d = pending.popleft()
            if isinstance(d, Request):
                self.scheduler.request(list(d.requests))
            elif isinstance(d, Cancel):
                self.scheduler.cancel(d.attempt)
            elif isinstance(d, Launch):
                try:
                    self.scheduler.launch(d.container, d.boot)
                except SchedulerError as err:
                    log.error("launch of %s failed: %s", d.boot.task, err)
                    self.master.on_container_exited(d.container.id, settings.EXIT_SPAWN_FAILED)
            elif isinstance(d, Release):
                self.scheduler.release(d.container)
            elif isinstance(d, Send):
                self.transport.send(d.task, d.msg)
            pending.extend(self.master.take_directives())

    def _status(self):
        if self.on_status is not None:
            self.on_status(self.master.status(), self.master.clock())
