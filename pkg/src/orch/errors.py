class OrchError(Exception):
    pass


# core model

class InvalidJobSpec(OrchError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class IllegalTransition(OrchError):
    def __init__(self, current, event):
        self.current = current
        self.event = event
        super().__init__(f"illegal transition: {current.value} on {event.value}")


# wire protocol

class DecodeError(OrchError):
    pass


class MalformedFrame(DecodeError):
    pass


class UnknownType(DecodeError):
    def __init__(self, type_name):
        self.type_name = type_name
        super().__init__(f"unknown message type: {type_name!r}")


class MissingField(DecodeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing field: {name}")


class InvariantViolation(DecodeError):
    def __init__(self, detail):
        self.detail = detail
        super().__init__(f"invariant violation: {detail}")


# client

class ConfigError(OrchError):
    pass


class MalformedXml(ConfigError):
    pass


class UnknownKey(ConfigError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"unknown key: {key}")


class MissingKey(ConfigError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"missing key: {key}")


class BadValue(ConfigError):
    def __init__(self, key, value, reason=""):
        self.key = key
        self.value = value
        msg = f"bad value for {key}: {value!r}"
        super().__init__(f"{msg} ({reason})" if reason else msg)


class MalformedMemory(BadValue):
    def __init__(self, text, key="memory"):
        super().__init__(key, text, "malformed memory string")


class PackagingError(OrchError):
    pass


class UnreadablePath(PackagingError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"unreadable path: {path}")


class EmptyProgramDir(PackagingError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"empty directory, nothing to run: {path}")


# backends

class SchedulerError(OrchError):
    pass


class HandleReleased(SchedulerError):
    def __init__(self, container_id):
        self.container_id = container_id
        super().__init__(f"container already released: {container_id}")


class SpawnFailure(SchedulerError):
    pass


class NoFreePort(OrchError):
    pass


# harness

class ScenarioError(OrchError):
    pass


class InfeasibleBounds(OrchError):
    pass
