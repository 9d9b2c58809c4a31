from orch.model import TaskId
from orch.trace import Trace


def test_records_are_sequenced_and_stamped():
    now = [0]
    t = Trace(lambda: now[0])
    t.emit("attempt", attempt=1, tasks=3)
    now[0] = 250
    rec = t.emit("task", attempt=1, subject=TaskId("worker", 0), to="ALLOCATED")
    assert (rec.time, rec.seq, rec.subject) == (250, 1, "worker/0")
    assert len(t) == 2
    assert [r.event for r in t] == ["attempt", "task"]


def test_ndjson_uses_canonical_encoding():
    t = Trace()
    t.emit("msg_out", attempt=1, subject="ps/0", type="SPEC")
    assert t.dumps() == (
        b'{"attempt":1,"detail":{"type":"SPEC"},"event":"msg_out","seq":0,"subject":"ps/0","time":0}\n'
    )


def test_loads_restores_records_and_outcome(tmp_path):
    t = Trace()
    t.emit("attempt", attempt=1, tasks=1)
    t.finish("SUCCEEDED")
    path = tmp_path / "trace.ndjson"
    t.write(path)
    back = Trace.loads(path.read_bytes())
    assert back.outcome == "SUCCEEDED"
    assert back.dumps() == t.dumps()


def test_subscribers_see_every_record():
    seen = []
    t = Trace()
    t.subscribe(seen.append)
    t.emit("a")
    t.emit("b")
    assert [r.event for r in seen] == ["a", "b"]
    assert [r.event for r in t.select("b")] == ["b"]
