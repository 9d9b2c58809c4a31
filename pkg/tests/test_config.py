import logging

import pytest

from orch.config import RawConfig, describe, parse_config, parse_memory, parse_overrides, read_properties
from orch.errors import BadValue, InvalidJobSpec, MalformedMemory, MalformedXml, MissingKey, UnknownKey
from orch.model import ResourceRequest


def xml(*props):
    body = "".join(f"<property><name>{n}</name><value>{v}</value></property>" for n, v in props)
    return f"<?xml version='1.0'?><configuration>{body}</configuration>".encode()


EXAMPLE = xml(
    ("orch.worker.instances", "2"),
    ("orch.worker.memory", "4g"),
    ("orch.ps.instances", "1"),
    ("orch.ps.memory", "2048m"),
    ("orch.application.command", "python3 train.py --epochs 3"),
)


class TestParseConfig:
    def test_example_job(self):
        spec = parse_config(EXAMPLE)
        worker, ps = spec.groups
        assert (worker.name, worker.instances, worker.resources, worker.tracked) == (
            "worker", 2, ResourceRequest(4096, 1, 0), True,
        )
        assert (ps.name, ps.instances, ps.resources, ps.tracked) == ("ps", 1, ResourceRequest(2048, 1, 0), False)
        assert spec.command == ("python3", "train.py", "--epochs", "3")
        assert spec.max_attempts == 3
        assert spec.heartbeat_interval_ms == 1000
        assert spec.heartbeat_miss_limit == 3
        assert spec.teardown_grace_ms == 2000

    def test_typo_in_group_name(self):
        with pytest.raises(UnknownKey) as e:
            parse_config(xml(("orch.worker.instances", "1"), ("orch.wroker.memory", "1g")))
        assert e.value.key == "orch.wroker.memory"

    def test_unknown_group_key(self):
        with pytest.raises(UnknownKey):
            parse_config(xml(("orch.worker.instances", "1"), ("orch.worker.disk", "10g")))

    def test_unknown_application_key(self):
        with pytest.raises(UnknownKey):
            parse_config(xml(("orch.worker.instances", "1"), ("orch.application.retries", "2")))

    def test_two_part_key(self):
        with pytest.raises(UnknownKey):
            parse_config(xml(("orch.worker", "1")))

    def test_declared_task_types(self):
        spec = parse_config(
            xml(("orch.application.task-types", "learner, actor"), ("orch.learner.instances", "1"), ("orch.actor.instances", "4"))
        )
        assert [g.name for g in spec.groups] == ["learner", "actor"]
        with pytest.raises(UnknownKey):
            parse_config(xml(("orch.application.task-types", "learner"), ("orch.worker.instances", "1")))

    def test_bad_task_types(self):
        with pytest.raises(BadValue):
            parse_config(xml(("orch.application.task-types", "Worker"), ("orch.worker.instances", "1")))

    def test_missing_instances(self):
        with pytest.raises(MissingKey) as e:
            parse_config(xml(("orch.worker.instances", "1"), ("orch.ps.memory", "1g")))
        assert e.value.key == "orch.ps.instances"

    def test_zero_instances_is_invalid(self):
        with pytest.raises(InvalidJobSpec) as e:
            parse_config(xml(("orch.worker.instances", "0")))
        assert "zero instances: worker" in e.value.errors

    def test_only_untracked_groups(self):
        with pytest.raises(InvalidJobSpec) as e:
            parse_config(xml(("orch.ps.instances", "2")))
        assert e.value.errors == ["no tracked group"]

    def test_no_groups(self):
        with pytest.raises(InvalidJobSpec):
            parse_config(xml(("orch.application.name", "empty")))

    def test_tracked_override(self):
        spec = parse_config(xml(("orch.worker.instances", "1"), ("orch.ps.instances", "1"), ("orch.ps.tracked", "true")))
        assert all(g.tracked for g in spec.groups)

    @pytest.mark.parametrize(
        "key,value",
        [
            ("orch.worker.vcores", "two"),
            ("orch.worker.tracked", "yes"),
            ("orch.application.max-attempts", "3.5"),
            ("orch.application.max-attempts", "1_0"),
            ("orch.worker.instances", "\u0663"),
            ("orch.application.heartbeat-ms", "+5"),
            ("orch.application.command", "python3 'unterminated"),
        ],
    )
    def test_bad_values(self, key, value):
        with pytest.raises(BadValue):
            parse_config(xml(("orch.worker.instances", "1"), (key, value)))

    def test_fractional_memory(self):
        with pytest.raises(MalformedMemory) as e:
            parse_config(xml(("orch.worker.instances", "1"), ("orch.worker.memory", "1.5g")))
        assert e.value.key == "orch.worker.memory"

    def test_environment_and_scheduler(self):
        spec = parse_config(
            xml(
                ("orch.worker.instances", "1"),
                ("orch.application.env.LEARNING_RATE", "0.01"),
                ("orch.scheduler.queue", "gpu"),
                ("orch.scheduler.node-label", "v100"),
            )
        )
        assert spec.extra_env == {"LEARNING_RATE": "0.01"}
        assert spec.scheduler_config == {"queue": "gpu", "node-label": "v100"}

    def test_timing_keys(self):
        spec = parse_config(
            xml(
                ("orch.worker.instances", "1"),
                ("orch.application.max-attempts", "5"),
                ("orch.application.heartbeat-ms", "250"),
                ("orch.application.heartbeat-miss-limit", "4"),
                ("orch.application.teardown-grace-ms", "0"),
            )
        )
        assert (spec.max_attempts, spec.heartbeat_interval_ms, spec.heartbeat_miss_limit, spec.teardown_grace_ms) == (
            5, 250, 4, 0,
        )

    def test_foreign_keys_are_ignored(self, caplog):
        with caplog.at_level(logging.WARNING, logger="orch.config"):
            spec = parse_config(xml(("orch.worker.instances", "1"), ("fs.defaultFS", "hdfs://nn:8020")))
        assert spec.total_instances == 1
        assert "fs.defaultFS" in caplog.text

    def test_duplicate_property_last_wins(self, caplog):
        with caplog.at_level(logging.WARNING, logger="orch.config"):
            spec = parse_config(xml(("orch.worker.instances", "1"), ("orch.worker.instances", "3")))
        assert spec.group("worker").instances == 3
        assert "duplicate property orch.worker.instances" in caplog.text

    def test_overrides_win(self):
        spec = parse_config(EXAMPLE, ["orch.worker.instances=4", "orch.application.name = tuned"])
        assert spec.group("worker").instances == 4
        assert spec.job_name == "tuned"

    def test_override_without_equals(self):
        with pytest.raises(BadValue):
            parse_config(EXAMPLE, ["orch.worker.instances"])


class TestReadProperties:
    def test_malformed_xml(self):
        with pytest.raises(MalformedXml):
            read_properties(b"<configuration><property>")

    def test_wrong_root(self):
        with pytest.raises(MalformedXml):
            read_properties(b"<properties/>")

    def test_nameless_property(self):
        with pytest.raises(MalformedXml):
            read_properties(b"<configuration><property><value>1</value></property></configuration>")

    def test_order_and_whitespace(self):
        raw = read_properties(xml(("a", " 1 "), ("b", "")))
        assert raw.properties == (("a", "1"), ("b", ""))

    def test_resolved(self):
        assert RawConfig((("a", "1"), ("a", "2"))).resolved() == {"a": "2"}


@pytest.mark.parametrize("text,mb", [("512", 512), ("512m", 512), ("4g", 4096), ("2G", 2048), (" 64M ", 64)])
def test_parse_memory(text, mb):
    assert parse_memory(text) == mb


@pytest.mark.parametrize("text", ["", "g", "1.5g", "4gb", "-1", "4 g"])
def test_parse_memory_rejects(text):
    with pytest.raises(MalformedMemory):
        parse_memory(text)


def test_parse_overrides():
    assert parse_overrides(["a=1", "b = x=y"]) == [("a", "1"), ("b", "x=y")]
    with pytest.raises(BadValue):
        parse_overrides(["=1"])


def test_describe():
    lines = describe(parse_config(EXAMPLE, ["orch.scheduler.queue=default"]))
    assert lines == [
        "job orch-job: max_attempts=3 heartbeat_ms=1000 miss_limit=3 grace_ms=2000",
        "group worker: instances=2 memory_mb=4096 vcores=1 gpus=0 tracked=true",
        "group ps: instances=1 memory_mb=2048 vcores=1 gpus=0 tracked=false",
        "command: python3 train.py --epochs 3",
        "scheduler queue=default",
    ]
