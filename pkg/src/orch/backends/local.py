"""Runs every container as an executor process on this machine.

Each container gets ``<workdir>/containers/<id>/`` (the program archive is
unpacked there) and a log file ``<workdir>/logs/<attempt>/<group>-<index>.log``
collecting the executor's and the payload's output. Executors are process
group leaders so releasing a container takes the payload down with it.
Must be driven from a running asyncio loop.
"""

import asyncio
import logging
import os
import signal
import subprocess
import sys
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import orch
from orch import settings
from orch.backends.base import Allocated, ContainerExited, ContainerHandle, Rejected, Scheduler
from orch.errors import HandleReleased, PackagingError, SpawnFailure
from orch.executor import Bootstrap, exit_code_of
from orch.packaging import unpack

log = logging.getLogger(__name__)

PACKAGE_ROOT = Path(orch.__file__).resolve().parent.parent


@dataclass
class _Slot:
    handle: ContainerHandle
    request: object
    proc: Optional[subprocess.Popen] = None
    logfile: object = None
    watcher: Optional[asyncio.Task] = None
    released: bool = False


class LocalBackend(Scheduler):
    def __init__(self, workdir, slots=settings.LOCAL_SLOTS, archive: Optional[bytes] = None, queues=(), executor_cmd=None):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.workdir = Path(workdir)
        self.slots = slots
        self.archive = archive
        self.queues = tuple(queues)
        self.executor_cmd = list(executor_cmd or [sys.executable, "-m", "orch.executor"])
        self._pending = deque()
        self._live = {}
        self._counter = 0

    @property
    def live(self) -> int:
        return len(self._live)

    def request(self, reqs):
        gang = Counter(r.attempt for r in reqs)
        for req in reqs:
            if gang[req.attempt] > self.slots:
                self.emit(Rejected(req, f"gang of {gang[req.attempt]} containers exceeds {self.slots} slots"))
                continue
            queue = req.scheduler_config.get("queue", "default")
            if self.queues and queue not in self.queues:
                self.emit(Rejected(req, f"unknown queue {queue!r}"))
                continue
            self._pending.append(req)
        self._place()

    def _place(self):
        while self._pending and len(self._live) < self.slots:
            req = self._pending.popleft()
            self._counter += 1
            cid = f"local-{self._counter:04d}"
            logpath = self.workdir / "logs" / str(req.attempt) / f"{req.task.group}-{req.task.index}.log"
            handle = ContainerHandle(cid, settings.LOCAL_HOST, req.resources, str(logpath))
            self._live[cid] = _Slot(handle, req)
            self.emit(Allocated(handle, req))

    def cancel(self, attempt: int):
        self._pending = deque(r for r in self._pending if r.attempt > attempt)

    def launch(self, handle: ContainerHandle, boot: Bootstrap):
        slot = self._live.get(handle.id)
        if slot is None or slot.released:
            raise HandleReleased(handle.id)
        cdir = self.workdir / "containers" / handle.id
        if self.archive is not None:
            try:
                unpack(self.archive, cdir)
            except PackagingError as err:
                raise SpawnFailure(f"cannot unpack program for {boot.task}: {err}") from None
        else:
            cdir.mkdir(parents=True, exist_ok=True)
        logpath = Path(handle.log_link)
        logpath.parent.mkdir(parents=True, exist_ok=True)

        env = dict(os.environ)
        env.update(boot.to_env())
        env["PYTHONPATH"] = os.pathsep.join(p for p in (str(PACKAGE_ROOT), env.get("PYTHONPATH", "")) if p)
        slot.logfile = open(logpath, "ab")
        try:
            slot.proc = subprocess.Popen(
                self.executor_cmd,
                cwd=cdir,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=slot.logfile,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except OSError as err:
            slot.logfile.close()
            raise SpawnFailure(f"cannot start executor for {boot.task}: {err}") from None
        log.info("%s attempt %d: executor pid %d in %s", boot.task, boot.attempt, slot.proc.pid, cdir)
        slot.watcher = asyncio.get_running_loop().create_task(self._watch(slot))
        return slot.proc.pid

    async def _watch(self, slot: _Slot):
        rc = await asyncio.to_thread(slot.proc.wait)
        slot.logfile.close()
        if not slot.released:
            self.emit(ContainerExited(slot.handle, exit_code_of(rc)))

    def release(self, handle: ContainerHandle):
        slot = self._live.pop(handle.id, None)
        if slot is None:
            log.info("container %s already released", handle.id)
            return
        slot.released = True
        if slot.proc is not None:
            try:
                os.killpg(slot.proc.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        self._place()

    def shutdown(self):
        for slot in list(self._live.values()):
            self.release(slot.handle)
