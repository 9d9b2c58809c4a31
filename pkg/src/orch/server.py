"""The master process loop for real executors.

Connection readers, the backend and a ticker only put events on one queue;
the loop hands them to JobRunner one at a time, so the master itself needs
no locking.
"""

import asyncio
import logging
from typing import Callable, Optional

from orch import settings
from orch.backends.base import Disconnected, FrameReceived, Tick
from orch.master import JobStatusSnapshot, Master
from orch.runtime import JobRunner, Transport
from orch.trace import Trace

log = logging.getLogger(__name__)


class Connection:
    def __init__(self, writer: asyncio.StreamWriter):
        self.writer = writer
        self.peer = writer.get_extra_info("peername")

    def write(self, data: bytes):
        if self.writer.is_closing():
            log.debug("connection %s closing, dropping %d bytes", self.peer, len(data))
            return
        self.writer.write(data)

    def close(self):
        if not self.writer.is_closing():
            self.writer.close()

    def __repr__(self):
        return f"Connection({self.peer})"


async def _read(reader, conn, events: asyncio.Queue):
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            events.put_nowait(FrameReceived(line, conn))
    except (ConnectionError, ValueError) as err:
        log.warning("reading from %s failed: %s", conn.peer, err)
    finally:
        events.put_nowait(Disconnected(conn))


async def _tick(events: asyncio.Queue, clock, tick_ms):
    while True:
        await asyncio.sleep(tick_ms / 1000)
        events.put_nowait(Tick(clock()))


async def serve_job(
    spec,
    backend,
    on_status: Optional[Callable] = None,
    trace_path=None,
    recovery_order="release-first",
    host=settings.LOCAL_HOST,
    tick_ms=settings.TICK_MS,
) -> JobStatusSnapshot:
    """Run one job to completion against ``backend``; returns the final status."""
    loop = asyncio.get_running_loop()
    t0 = loop.time()

    def clock():
        return int((loop.time() - t0) * 1000)

    events = asyncio.Queue()
    conns = set()

    async def accept(reader, writer):
        conn = Connection(writer)
        conns.add(conn)
        try:
            await _read(reader, conn, events)
        finally:
            conns.discard(conn)
            conn.close()

    server = await asyncio.start_server(accept, host, 0)
    port = server.sockets[0].getsockname()[1]
    log.info("master listening on %s:%d", host, port)

    trace = Trace(clock)
    master = Master(spec, clock, trace, master_addr=f"{host}:{port}", recovery_order=recovery_order)
    runner = JobRunner(master, backend, Transport(lambda conn, data: conn.write(data)), on_status=on_status)
    backend.attach(events.put_nowait)
    ticker = asyncio.create_task(_tick(events, clock, tick_ms))
    try:
        runner.start()
        while not master.finished:
            runner.handle(await events.get())
    finally:
        ticker.cancel()
        backend.shutdown()
        for conn in list(conns):
            conn.close()
        server.close()
        trace.finish(master.state.value)
        if trace_path is not None:
            trace.write(trace_path)
    return master.status()
