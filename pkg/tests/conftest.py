import pytest

from orch.backends.sim import ChildBehavior, SimClusterConfig, SimHost
from orch.harness import ScenarioScript
from orch.model import JobSpec, ResourceRequest, TaskGroupSpec, TaskId

WORKER0 = TaskId("worker", 0)
WORKER1 = TaskId("worker", 1)
PS0 = TaskId("ps", 0)


def job(workers=2, ps=1, max_attempts=2, **kwargs):
    groups = [TaskGroupSpec("worker", workers, ResourceRequest(2048, 1, 0), tracked=True)]
    if ps:
        groups.append(TaskGroupSpec("ps", ps, ResourceRequest(2048, 1, 0), tracked=False))
    return JobSpec("test-job", tuple(groups), command=("python3", "train.py"), max_attempts=max_attempts, **kwargs)


def cluster(hosts=3, memory_mb=8192, vcores=4, **kwargs):
    return SimClusterConfig(
        hosts=tuple(SimHost(f"h{i + 1}", ResourceRequest(memory_mb, vcores, 0)) for i in range(hosts)),
        **kwargs,
    )


def scenario(actions=(), run_ms=500, ps_run_ms=None, **job_kwargs):
    children = {"ps": ChildBehavior(0, ps_run_ms)} if ps_run_ms else {}
    return ScenarioScript(
        cluster=cluster(),
        job=job(**job_kwargs),
        actions=tuple(actions),
        default_child=ChildBehavior(0, run_ms),
        children=children,
    )


@pytest.fixture
def spec():
    return job()


@pytest.fixture
def small_cluster():
    return cluster()
