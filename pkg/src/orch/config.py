"""Hadoop-style property documents to JobSpec.

Key grammar::

    orch.<group>.{instances,memory,vcores,gpus,tracked}
    orch.application.{name,command,max-attempts,heartbeat-ms,
                      heartbeat-miss-limit,teardown-grace-ms,task-types}
    orch.application.env.<NAME>
    orch.scheduler.<key>          passed through to the scheduler

Any other ``orch.*`` key is an error. Foreign keys are ignored.
"""

import logging
import re
import shlex
from dataclasses import dataclass
from typing import Tuple
from xml.etree import ElementTree

from orch import settings
from orch.errors import BadValue, MalformedMemory, MalformedXml, MissingKey, UnknownKey
from orch.model import GROUP_NAME, JobSpec, ResourceRequest, TaskGroupSpec, validate_job_spec

log = logging.getLogger(__name__)

MEMORY = re.compile(r"([0-9]+)([mg]?)", re.IGNORECASE)
INTEGER = re.compile(r"-?[0-9]+")

GROUP_KEYS = ("instances", "memory", "vcores", "gpus", "tracked")
APP_KEYS = (
    "name",
    "command",
    "max-attempts",
    "heartbeat-ms",
    "heartbeat-miss-limit",
    "teardown-grace-ms",
    "task-types",
)


@dataclass(frozen=True)
class RawConfig:
    properties: Tuple[Tuple[str, str], ...] = ()

    def resolved(self, warn=True):
        """Last one wins."""
        out = {}
        for name, value in self.properties:
            if warn and name in out and out[name] != value:
                log.warning("duplicate property %s: %r replaces %r", name, value, out[name])
            out[name] = value
        return out


def parse_memory(text: str, key="memory") -> int:
    """MiB from "512", "512m" or "4g"."""
    m = MEMORY.fullmatch(text.strip())
    if m is None:
        raise MalformedMemory(text, key)
    n = int(m.group(1))
    return n * 1024 if m.group(2).lower() == "g" else n


def read_properties(document) -> RawConfig:
    try:
        root = ElementTree.fromstring(document)
    except ElementTree.ParseError as err:
        raise MalformedXml(f"malformed xml: {err}") from None
    if root.tag != "configuration":
        raise MalformedXml(f"expected <configuration>, got <{root.tag}>")
    props = []
    for prop in root.iter("property"):
        name = prop.findtext("name")
        if name is None or not name.strip():
            raise MalformedXml("property without a name")
        props.append((name.strip(), (prop.findtext("value") or "").strip()))
    return RawConfig(tuple(props))


def parse_overrides(overrides):
    out = []
    for item in overrides:
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise BadValue("--set", item, "expected name=value")
        out.append((name.strip(), value.strip()))
    return out


def _int(key, value, minimum=None):
    if not INTEGER.fullmatch(value.strip()):
        raise BadValue(key, value, "not an integer")
    n = int(value)
    if minimum is not None and n < minimum:
        raise BadValue(key, value, f"must be >= {minimum}")
    return n


def _bool(key, value):
    v = value.lower()
    if v not in ("true", "false"):
        raise BadValue(key, value, "expected true or false")
    return v == "true"


def _task_types(props):
    text = props.get("orch.application.task-types")
    if text is None:
        return settings.DEFAULT_TASK_TYPES
    types = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in types if not GROUP_NAME.fullmatch(t) or t in ("application", "scheduler")]
    if not types or bad:
        raise BadValue("orch.application.task-types", text, "comma list of group names")
    return types


def parse_config(document, overrides=()) -> JobSpec:
    """XML document plus ``name=value`` overrides to a validated JobSpec."""
    raw = read_properties(document)
    props = raw.resolved()
    props.update(RawConfig(tuple(parse_overrides(overrides))).resolved(warn=False))
    types = _task_types(props)

    groups = {}
    app = {}
    env = {}
    sched = {}
    for key, value in props.items():
        if not key.startswith("orch."):
            log.warning("ignoring non-orch property %s", key)
            continue
        parts = key.split(".")
        if len(parts) < 3:
            raise UnknownKey(key)
        if parts[1] == "application":
            rest = ".".join(parts[2:])
            if parts[2] == "env" and len(parts) > 3:
                env[".".join(parts[3:])] = value
            elif rest in APP_KEYS:
                app[rest] = value
            else:
                raise UnknownKey(key)
        elif parts[1] == "scheduler":
            sched[".".join(parts[2:])] = value
        elif len(parts) == 3 and parts[1] in types and parts[2] in GROUP_KEYS:
            groups.setdefault(parts[1], {})[parts[2]] = value
        else:
            raise UnknownKey(key)

    specs = []
    for name, kv in groups.items():
        if "instances" not in kv:
            raise MissingKey(f"orch.{name}.instances")
        prefix = f"orch.{name}."
        mem = kv.get("memory")
        res = ResourceRequest(
            parse_memory(mem, prefix + "memory") if mem is not None else settings.DEFAULT_MEMORY_MB,
            _int(prefix + "vcores", kv["vcores"]) if "vcores" in kv else settings.DEFAULT_VCORES,
            _int(prefix + "gpus", kv["gpus"]) if "gpus" in kv else settings.DEFAULT_GPUS,
        )
        tracked = _bool(prefix + "tracked", kv["tracked"]) if "tracked" in kv else name not in settings.UNTRACKED_GROUPS
        specs.append(TaskGroupSpec(name, _int(prefix + "instances", kv["instances"]), res, tracked))

    command = ()
    if "command" in app:
        try:
            command = tuple(shlex.split(app["command"]))
        except ValueError as err:
            raise BadValue("orch.application.command", app["command"], str(err)) from None

    def num(k, default):
        return _int(f"orch.application.{k}", app[k]) if k in app else default

    spec = JobSpec(
        job_name=app.get("name") or settings.DEFAULT_JOB_NAME,
        groups=tuple(specs),
        command=command,
        extra_env=env,
        max_attempts=num("max-attempts", settings.MAX_ATTEMPTS),
        heartbeat_interval_ms=num("heartbeat-ms", settings.HEARTBEAT_MS),
        heartbeat_miss_limit=num("heartbeat-miss-limit", settings.HEARTBEAT_MISS_LIMIT),
        scheduler_config=sched,
        teardown_grace_ms=num("teardown-grace-ms", settings.TEARDOWN_GRACE_MS),
    )
    return validate_job_spec(spec)


def describe(spec: JobSpec):
    """Normalized job, one line per group and one for the application."""
    lines = [
        f"job {spec.job_name}: max_attempts={spec.max_attempts} heartbeat_ms={spec.heartbeat_interval_ms} "
        f"miss_limit={spec.heartbeat_miss_limit} grace_ms={spec.teardown_grace_ms}"
    ]
    for g in spec.groups:
        r = g.resources
        lines.append(
            f"group {g.name}: instances={g.instances} memory_mb={r.memory_mb} vcores={r.vcores} "
            f"gpus={r.gpus} tracked={'true' if g.tracked else 'false'}"
        )
    if spec.command:
        lines.append(f"command: {shlex.join(spec.command)}")
    for k, v in sorted(spec.scheduler_config.items()):
        lines.append(f"scheduler {k}={v}")
    return lines
