import pytest

from conftest import PS0, WORKER0, WORKER1
from orch.backends.base import Allocated, ContainerRequest, Rejected
from orch.backends.local import LocalBackend
from orch.errors import SpawnFailure
from orch.executor import Bootstrap
from orch.model import ResourceRequest


def req(task, attempt=1, **cfg):
    return ContainerRequest(task, ResourceRequest(512, 1, 0), attempt, cfg)


def backend(tmp_path, **kw):
    events = []
    b = LocalBackend(tmp_path, **kw)
    b.attach(events.append)
    return b, events


def test_places_up_to_slots(tmp_path):
    b, events = backend(tmp_path, slots=3)
    b.request([req(WORKER0), req(WORKER1), req(PS0)])
    assert [type(e) for e in events] == [Allocated] * 3
    assert [e.container.id for e in events] == ["local-0001", "local-0002", "local-0003"]
    assert events[0].container.log_link.endswith("logs/1/worker-0.log")
    assert b.live == 3


def test_gang_larger_than_slots_is_rejected(tmp_path):
    b, events = backend(tmp_path, slots=2)
    b.request([req(WORKER0), req(WORKER1), req(PS0)])
    assert [type(e) for e in events] == [Rejected] * 3
    assert events[0].reason == "gang of 3 containers exceeds 2 slots"
    assert b.live == 0


def test_unknown_queue_is_rejected(tmp_path):
    b, events = backend(tmp_path, queues=("default",))
    b.request([req(WORKER0, queue="batch")])
    (e,) = events
    assert isinstance(e, Rejected) and e.reason == "unknown queue 'batch'"


def test_release_frees_the_slot(tmp_path):
    b, events = backend(tmp_path, slots=1)
    b.request([req(WORKER0)])
    b.request([req(WORKER0, attempt=2)])
    assert len(events) == 1
    b.release(events[0].container)
    assert [e.request.attempt for e in events] == [1, 2]


def test_unpack_failure_is_a_spawn_failure(tmp_path):
    b, events = backend(tmp_path, archive=b"not a tar archive" * 64)
    b.request([req(WORKER0)])
    with pytest.raises(SpawnFailure):
        b.launch(events[0].container, Bootstrap("m:1", WORKER0, 1))
