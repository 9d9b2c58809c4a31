import pytest

from orch.errors import IllegalTransition, InvalidJobSpec, InvariantViolation
from orch.model import (
    ClusterSpec,
    JobSpec,
    JobState,
    ResourceRequest,
    TaskEvent,
    TaskGroupSpec,
    TaskId,
    TaskStatus,
    canonical_spec_encoding,
    decode_cluster_spec,
    job_spec_errors,
    job_transition,
    parse_endpoint,
    transition,
    validate_job_spec,
)

from conftest import job


class TestValidateJobSpec:
    def test_worker_and_ps_is_valid(self):
        spec = job(workers=2, ps=1, max_attempts=2)
        assert validate_job_spec(spec) is spec

    def test_duplicate_group(self):
        g = TaskGroupSpec("worker", 1)
        with pytest.raises(InvalidJobSpec) as e:
            validate_job_spec(JobSpec("j", (g, g)))
        assert "duplicate group name: worker" in e.value.errors

    def test_no_tracked_group(self):
        spec = JobSpec("j", (TaskGroupSpec("ps", 1, tracked=False),))
        assert job_spec_errors(spec) == ["no tracked group"]

    def test_reports_every_violation(self):
        spec = JobSpec(
            "j",
            (TaskGroupSpec("Worker", 0, ResourceRequest(0, 0, -1), tracked=False),),
            max_attempts=0,
        )
        errs = job_spec_errors(spec)
        assert errs == [
            "malformed group name: 'Worker'",
            "zero instances: Worker",
            "memory_mb must be >= 1: Worker",
            "vcores must be >= 1: Worker",
            "gpus must be >= 0: Worker",
            "no tracked group",
            "max_attempts must be >= 1",
        ]

    def test_message_joins_errors(self):
        with pytest.raises(InvalidJobSpec, match="no groups; no tracked group"):
            validate_job_spec(JobSpec("j", ()))


class TestJobSpec:
    def test_task_ids_in_group_order(self):
        assert [str(t) for t in job().task_ids()] == ["worker/0", "worker/1", "ps/0"]

    def test_ui_task_is_first_tracked_index_zero(self):
        spec = JobSpec("j", (TaskGroupSpec("ps", 1, tracked=False), TaskGroupSpec("chief", 1)))
        assert spec.ui_task == TaskId("chief", 0)

    def test_has_task(self):
        spec = job(workers=2)
        assert spec.has_task(TaskId("worker", 1))
        assert not spec.has_task(TaskId("worker", 2))
        assert not spec.has_task(TaskId("chief", 0))

    def test_heartbeat_timeout(self):
        assert job(heartbeat_interval_ms=1000, heartbeat_miss_limit=3).heartbeat_timeout_ms == 3000


class TestResourceRequest:
    def test_arithmetic(self):
        a = ResourceRequest(1024, 1, 0)
        assert a + a == ResourceRequest(2048, 2, 0)
        assert (a + a) - a == a

    def test_fits_in(self):
        assert ResourceRequest(1024, 1, 1).fits_in(ResourceRequest(1024, 1, 1))
        assert not ResourceRequest(1024, 1, 1).fits_in(ResourceRequest(4096, 4, 0))


class TestTaskId:
    def test_parse_and_str(self):
        t = TaskId.parse("worker/3")
        assert t == TaskId("worker", 3)
        assert str(t) == "worker/3"

    @pytest.mark.parametrize("text", ["worker", "worker/x", "Worker/0", "/0"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            TaskId.parse(text)


class TestClusterSpecEncoding:
    def test_sorted_keys_index_order(self):
        cs = ClusterSpec({"worker": ["h1:4000", "h2:4001"], "ps": ["h3:5000"]})
        assert canonical_spec_encoding(cs) == b'{"ps":["h3:5000"],"worker":["h1:4000","h2:4001"]}'

    def test_equal_specs_equal_bytes(self):
        a = ClusterSpec({"worker": ("h1:1",), "ps": ("h2:2",)})
        b = ClusterSpec({"ps": ["h2:2"], "worker": ["h1:1"]})
        assert canonical_spec_encoding(a) == canonical_spec_encoding(b)

    def test_decode_inverts_encode(self):
        cs = ClusterSpec({"worker": ["h1:4000", "h2:4001"], "ps": ["h3:5000"]})
        assert decode_cluster_spec(canonical_spec_encoding(cs)) == cs

    def test_unicode_host_is_utf8(self):
        cs = ClusterSpec({"worker": ["hôte:4000"]})
        assert canonical_spec_encoding(cs) == '{"worker":["hôte:4000"]}'.encode("utf-8")

    def test_check_against_job(self):
        spec = job(workers=2, ps=1)
        ClusterSpec({"worker": ["a:1", "b:2"], "ps": ["c:3"]}).check(spec)
        with pytest.raises(InvariantViolation):
            ClusterSpec({"worker": ["a:1"], "ps": ["c:3"]}).check(spec)

    @pytest.mark.parametrize("text", ["h1", "h1:0", "h1:65536", "h1:abc", ":80"])
    def test_bad_endpoints(self, text):
        with pytest.raises(InvariantViolation):
            parse_endpoint(text)

    def test_endpoint(self):
        assert parse_endpoint("h1:65535") == ("h1", 65535)


class TestTaskTransitions:
    def test_happy_path(self):
        s = TaskStatus.REQUESTED
        for ev in (TaskEvent.ALLOCATED, TaskEvent.REGISTERED, TaskEvent.CHILD_STARTED, TaskEvent.EXITED_ZERO):
            s = transition(s, ev)
        assert s == TaskStatus.SUCCEEDED

    @pytest.mark.parametrize("status", [TaskStatus.ALLOCATED, TaskStatus.REGISTERED, TaskStatus.RUNNING])
    def test_lost_from_live_states(self, status):
        assert transition(status, TaskEvent.HEARTBEAT_LOST) == TaskStatus.LOST

    def test_register_before_allocation_is_illegal(self):
        with pytest.raises(IllegalTransition):
            transition(TaskStatus.REQUESTED, TaskEvent.REGISTERED)

    @pytest.mark.parametrize("status", [TaskStatus.SUCCEEDED, TaskStatus.FAILED, TaskStatus.LOST])
    @pytest.mark.parametrize("event", list(TaskEvent))
    def test_terminal_states_absorb(self, status, event):
        assert status.terminal
        with pytest.raises(IllegalTransition):
            transition(status, event)


class TestJobTransitions:
    def test_table(self):
        assert job_transition(JobState.SUBMITTED, JobState.ALLOCATING) == JobState.ALLOCATING
        assert job_transition(JobState.RECOVERING, JobState.ALLOCATING) == JobState.ALLOCATING
        assert job_transition(JobState.ALLOCATING, JobState.FAILED) == JobState.FAILED
        with pytest.raises(ValueError):
            job_transition(JobState.RUNNING, JobState.FAILED)
        with pytest.raises(ValueError):
            job_transition(JobState.SUCCEEDED, JobState.ALLOCATING)
