import pytest

from conftest import PS0, WORKER0, WORKER1, job
from orch.backends.base import ContainerHandle
from orch.master import Cancel, Launch, Master, Release, Request, Send, build_cluster_spec
from orch.model import JobState, ResourceRequest, TaskId, TaskStatus
from orch.protocol import ChildState, Exit, Heartbeat, Register, Spec, Teardown

TASKS = [WORKER0, WORKER1, PS0]


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


def handle(cid):
    return ContainerHandle(cid, "h1", ResourceRequest(2048, 1, 0), f"sim://h1/{cid}.log")


def sends(directives, kind=None):
    out = [d for d in directives if isinstance(d, Send)]
    return [d for d in out if kind is None or isinstance(d.msg, kind)]


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def master(clock):
    return Master(job(), clock, master_addr="m:1")


def allocate(m, attempt=1, prefix="c"):
    for i, t in enumerate(TASKS):
        m.on_allocated(handle(f"{prefix}{attempt}{i}"), t, attempt)


def register(m, attempt=1):
    out = []
    for i, t in enumerate(TASKS):
        out += m.on_register(Register(attempt, t, f"h{i + 1}", 4000 + i, 6006 if t == WORKER0 else None))
    return out


def running(m, attempt=1):
    m.start()
    allocate(m, attempt)
    register(m, attempt)
    for t in TASKS:
        m.on_heartbeat(Heartbeat(attempt, t, ChildState.RUNNING))
    m.take_directives()


class TestStart:
    def test_one_request_per_instance(self, master):
        reqs = master.start()
        assert [r.task for r in reqs] == TASKS
        assert {r.attempt for r in reqs} == {1}
        (d,) = master.take_directives()
        assert isinstance(d, Request) and len(d.requests) == 3
        assert master.state == JobState.ALLOCATING

    def test_launch_carries_bootstrap(self, master):
        master.start()
        master.take_directives()
        launch = master.on_allocated(handle("c1"), WORKER0, 1)
        assert isinstance(launch, Launch)
        assert launch.boot.master_addr == "m:1"
        assert launch.boot.is_ui_task
        assert launch.boot.command == ("python3", "train.py")
        assert master.on_allocated(handle("c2"), PS0, 1).boot.is_ui_task is False

    def test_all_allocated_awaits_registration(self, master):
        master.start()
        allocate(master)
        assert master.state == JobState.AWAITING_REGISTRATION
        assert [v.status for v in master.status().tasks] == [TaskStatus.ALLOCATED] * 3

    def test_stale_allocation_is_released(self, master):
        master.start()
        master.take_directives()
        assert master.on_allocated(handle("old"), WORKER0, 7) is None
        (d,) = master.take_directives()
        assert isinstance(d, Release) and d.container.id == "old"

    def test_duplicate_allocation_is_released(self, master):
        master.start()
        master.on_allocated(handle("a"), WORKER0, 1)
        master.take_directives()
        assert master.on_allocated(handle("b"), WORKER0, 1) is None
        assert [type(d) for d in master.take_directives()] == [Release]

    def test_unknown_task_allocation_is_released(self, master):
        master.start()
        master.take_directives()
        assert master.on_allocated(handle("x"), TaskId("ps", 5), 1) is None
        (d,) = master.take_directives()
        assert isinstance(d, Release) and d.container.id == "x"
        assert master.trace.select("alloc_refused")[0].detail["reason"] == "unknown task"


class TestBroadcast:
    def test_spec_only_after_last_registration(self, master):
        master.start()
        allocate(master)
        master.take_directives()
        assert master.on_register(Register(1, PS0, "h3", 5000)) == []
        assert master.on_register(Register(1, WORKER1, "h2", 4001)) == []
        out = master.on_register(Register(1, WORKER0, "h1", 4000))
        assert [s.task for s in out] == TASKS
        spec = out[0].msg
        assert isinstance(spec, Spec)
        assert spec.cluster_spec.endpoints == {"worker": ("h1:4000", "h2:4001"), "ps": ("h3:5000",)}
        assert master.state == JobState.RUNNING

    def test_broadcast_happens_once(self, master):
        master.start()
        allocate(master)
        register(master)
        assert len(master.trace.select("broadcast")) == 1
        assert len(sends(master.take_directives(), Spec)) == 3

    def test_ui_url_from_first_tracked_index_zero(self, master):
        master.start()
        allocate(master)
        register(master)
        assert master.status().ui_url == "http://h1:6006"

    def test_cluster_spec_ignores_arrival_order(self, master):
        master.start()
        allocate(master)
        register(master)
        cs = build_cluster_spec(reversed(list(master.records.values())))
        assert cs.endpoints["worker"] == ("h1:4000", "h2:4001")

    def test_heartbeat_running_moves_task(self, master):
        running(master)
        assert {v.status for v in master.status().tasks} == {TaskStatus.RUNNING}


class TestCompletion:
    def test_tracked_success_tears_down_the_rest(self, master, clock):
        running(master)
        master.on_exit(Exit(1, WORKER0, 0))
        assert master.on_exit(Exit(1, WORKER1, 0)) == JobState.SUCCEEDED
        teardowns = sends(master.take_directives(), Teardown)
        assert [s.task for s in teardowns] == [PS0]
        assert not master.finished
        clock.now = 2000
        master.tick(clock.now)
        released = [d for d in master.take_directives() if isinstance(d, Release)]
        assert len(released) == 3
        assert master.finished

    def test_untracked_exit_does_not_finish(self, master):
        running(master)
        master.on_exit(Exit(1, PS0, 0))
        assert master.state == JobState.RUNNING


class TestRecovery:
    def test_failure_tears_down_and_relaunches_whole_gang(self, master, clock):
        running(master)
        master.on_exit(Exit(1, WORKER1, 1))
        assert master.state == JobState.RECOVERING
        out = master.take_directives()
        assert sorted(str(s.task) for s in sends(out, Teardown)) == ["ps/0", "worker/0"]
        assert Cancel(1) in out
        clock.now = 1999
        master.tick(clock.now)
        assert master.take_directives() == []
        clock.now = 2000
        master.tick(clock.now)
        out = master.take_directives()
        assert [type(d) for d in out] == [Release, Release, Release, Request]
        assert master.attempt == 2
        assert master.state == JobState.ALLOCATING
        assert [r.attempt for r in out[-1].requests] == [2, 2, 2]

    def test_request_first_relaunches_before_release(self, clock):
        m = Master(job(), clock, recovery_order="request-first")
        running(m)
        m.on_exit(Exit(1, WORKER1, 1))
        out = m.take_directives()
        assert isinstance(out[-1], Request)
        assert not any(isinstance(d, Release) for d in out)
        assert m.attempt == 2

    def test_exhausted_attempts_fail_with_diagnostic(self, clock):
        m = Master(job(max_attempts=1), clock)
        running(m)
        m.on_exit(Exit(1, WORKER1, 3))
        assert m.state == JobState.FAILED
        diags = m.status().diagnostics
        assert diags[-1] == "attempts exhausted (1/1); failed tasks: worker/1"
        assert not any(isinstance(d, Request) for d in m.take_directives())

    def test_stale_messages_are_dropped(self, master, clock):
        running(master)
        master.on_exit(Exit(1, WORKER1, 1))
        clock.now = 2000
        master.tick(clock.now)
        master.take_directives()
        before = master.status()
        assert master.on_register(Register(1, WORKER0, "h1", 4000)) == []
        master.on_exit(Exit(1, WORKER0, 1))
        assert master.status() == before
        assert len(master.trace.select("msg_stale")) == 2

    def test_recovery_is_not_reentered(self, master):
        running(master)
        master.on_exit(Exit(1, WORKER1, 1))
        master.take_directives()
        assert master.recover() == []
        master.on_disconnect(WORKER0, 1)
        assert master.take_directives() == []

    def test_death_before_registration_is_lost(self, master):
        master.start()
        allocate(master)
        master.take_directives()
        master.on_container_exited("c11", 127)
        rec = master.records[WORKER1]
        assert rec.status == TaskStatus.LOST
        assert master.state == JobState.RECOVERING

    def test_register_before_allocation_recovers(self, master):
        master.start()
        master.take_directives()
        assert master.on_register(Register(1, WORKER0, "h1", 4000)) == []
        assert master.state == JobState.RECOVERING
        assert master.status().diagnostics[0] == "protocol violation: REGISTER from worker/0 in status REQUESTED"

    def test_unparseable_endpoint_recovers(self, master):
        master.start()
        allocate(master)
        master.take_directives()
        master.on_register(Register(1, WORKER0, "h1", 4000))
        master.on_register(Register(1, WORKER1, "h2", 4001))
        assert master.on_register(Register(1, PS0, "", 5000)) == []
        assert master.state == JobState.RECOVERING
        assert master.status().diagnostics[0] == "protocol violation: REGISTER from ps/0: bad endpoint: ':5000'"
        assert not sends(master.take_directives(), Spec)
        assert master.trace.select("broadcast") == []

    def test_rejection_fails_the_job(self, master):
        master.start()
        master.on_allocated(handle("c0"), WORKER0, 1)
        master.take_directives()
        master.on_rejected(WORKER1, 1, "no such queue")
        assert master.state == JobState.FAILED
        assert master.status().diagnostics == ("scheduler rejected worker/1: no such queue",)
        assert Cancel(1) in master.take_directives()


class TestHeartbeatTimeout:
    def test_lost_strictly_after_interval_times_limit(self, master, clock):
        running(master)
        clock.now = 3000
        assert master.tick(3000) == []
        for t in (WORKER0, PS0):
            master.on_heartbeat(Heartbeat(1, t, ChildState.RUNNING))
        clock.now = 3001
        (event,) = master.tick(3001)
        assert event.task == WORKER1
        assert event.silent_ms == 3001
        assert master.records[WORKER1].status == TaskStatus.LOST
        assert master.records[WORKER1].endpoint is None
        assert master.state == JobState.RECOVERING

    def test_two_silent_tasks_recover_once(self, master, clock):
        running(master)
        clock.now = 3000
        master.on_heartbeat(Heartbeat(1, PS0, ChildState.RUNNING))
        clock.now = 3001
        events = master.tick(3001)
        assert [e.task for e in events] == [WORKER0, WORKER1]
        assert [master.records[t].status for t in TASKS] == [TaskStatus.LOST, TaskStatus.LOST, TaskStatus.RUNNING]
        out = master.take_directives()
        assert out.count(Cancel(1)) == 1
        assert [s.task for s in sends(out, Teardown)] == [PS0]
        recovering = [r for r in master.trace.select("job") if r.detail["to"] == "RECOVERING"]
        assert len(recovering) == 1
        assert master.status().diagnostics == ("heartbeat lost: worker/0, worker/1 (attempt 1)",)

    def test_disconnect_marks_lost(self, master):
        running(master)
        master.on_disconnect(PS0, 1)
        assert master.records[PS0].status == TaskStatus.LOST
        assert master.state == JobState.RECOVERING


def test_rejects_unknown_recovery_order():
    with pytest.raises(ValueError):
        Master(job(), recovery_order="sideways")
