"""Replayable event log.

Each record is (time ms, seq, attempt, subject, event, detail). Records
serialize one per line with the same canonical object encoding the wire
protocol uses, so traces diff and grep cleanly.
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

from orch.model import canonical_json

JOB = "job"

# outcomes
SUCCEEDED = "SUCCEEDED"
FAILED = "FAILED"
HORIZON_EXCEEDED = "HORIZON_EXCEEDED"


@dataclass(frozen=True)
class TraceRecord:
    time: int
    seq: int
    attempt: int
    subject: str
    event: str
    detail: Mapping = field(default_factory=dict)

    def to_dict(self):
        return {
            "time": self.time,
            "seq": self.seq,
            "attempt": self.attempt,
            "subject": self.subject,
            "event": self.event,
            "detail": dict(self.detail),
        }


class Trace:
    def __init__(self, clock: Callable[[], int] = lambda: 0):
        self.clock = clock
        self.records = []
        self.outcome = None
        self._listeners = []

    def emit(self, event, *, attempt=0, subject=JOB, **detail):
        rec = TraceRecord(self.clock(), len(self.records), attempt, str(subject), event, detail)
        self.records.append(rec)
        for fn in self._listeners:
            fn(rec)
        return rec

    def subscribe(self, fn):
        self._listeners.append(fn)

    def finish(self, outcome):
        self.outcome = outcome
        self.emit("outcome", outcome=outcome)

    def select(self, event):
        return [r for r in self.records if r.event == event]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def dumps(self) -> bytes:
        return b"".join(canonical_json(r.to_dict()) + b"\n" for r in self.records)

    def write(self, path):
        with open(path, "wb") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, data: bytes) -> "Trace":
        t = cls()
        for line in data.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            t.records.append(TraceRecord(d["time"], d["seq"], d["attempt"], d["subject"], d["event"], d["detail"]))
        outcomes = [r for r in t.records if r.event == "outcome"]
        if outcomes:
            t.outcome = outcomes[-1].detail.get("outcome")
        return t
