"""Trace tables: fault classes per scenario and sweep summaries."""

import pandas as pd

from orch.trace import FAILED

BEFORE_BROADCAST = "fault_before_broadcast"
AFTER_BROADCAST = "fault_after_broadcast"
MULTI_FAULT = "multi_fault_same_attempt"
EXHAUSTED = "attempts_exhausted"
CLASSES = (BEFORE_BROADCAST, AFTER_BROADCAST, MULTI_FAULT, EXHAUSTED)

COLUMNS = ["time", "seq", "attempt", "subject", "event"]


def trace_frame(trace) -> pd.DataFrame:
    """One row per record; detail keys become ``detail.<key>`` columns."""
    rows = [r.to_dict() for r in trace]
    if not rows:
        return pd.DataFrame(columns=COLUMNS)
    return pd.json_normalize(rows)


def _col(df, name):
    return df[name] if name in df.columns else pd.Series(index=df.index, dtype=object)


def classify_trace(trace):
    df = trace_frame(trace)
    if df.empty:
        return set()
    classes = set()

    # failures against the broadcast of their attempt
    to = _col(df, "detail.to")
    fails = df[(df["event"] == "task") & to.isin(["FAILED", "LOST"])]
    bcast = df[df["event"] == "broadcast"].groupby("attempt")["seq"].min()
    for attempt, grp in fails.groupby("attempt"):
        b = bcast.get(attempt)
        if b is None or (grp["seq"] < b).any():
            classes.add(BEFORE_BROADCAST)
        if b is not None and (grp["seq"] > b).any():
            classes.add(AFTER_BROADCAST)

    # effective faults, counted against the attempt current when they fired
    marks = df[df["event"] == "attempt"][["seq", "attempt"]].rename(columns={"attempt": "current"})
    faults = df[(df["event"] == "fault") & (_col(df, "detail.effect") != "noop")]
    if not faults.empty and not marks.empty:
        faults = pd.merge_asof(faults.sort_values("seq"), marks, on="seq")
        per_attempt = faults.dropna(subset=["current"]).groupby("current").size()
        if (per_attempt >= 2).any():
            classes.add(MULTI_FAULT)

    # exhaustion
    if trace.outcome == FAILED:
        diags = _col(df[df["event"] == "diagnostic"], "detail.text").astype(str)
        if diags.str.startswith("attempts exhausted").any():
            classes.add(EXHAUSTED)
    return classes


def summarize(results) -> pd.DataFrame:
    """One row per scenario result from ``harness.run_batch``."""
    rows = []
    for res in results:
        recs = list(res.trace)
        rows.append({
            "scenario": res.index,
            "seed": res.seed,
            "job": res.script.job.job_name,
            "tasks": res.script.job.total_instances,
            "max_attempts": res.script.job.max_attempts,
            "faults": len(res.script.actions),
            "outcome": res.trace.outcome,
            "attempts": max((r.attempt for r in recs if r.event == "attempt"), default=0),
            "broadcasts": sum(1 for r in recs if r.event == "broadcast"),
            "registers": sum(1 for r in recs if r.event == "msg_in" and r.detail.get("type") == "REGISTER"),
            "end_ms": recs[-1].time if recs else 0,
            "records": len(recs),
            "violations": len(res.violations),
            "classes": ",".join(sorted(classify_trace(res.trace))),
        })
    return pd.DataFrame(rows)


def coverage(summary: pd.DataFrame) -> pd.Series:
    """Scenarios per fault class, zero-filled."""
    if summary.empty:
        return pd.Series(0, index=list(CLASSES), name="scenarios")
    labels = summary["classes"].str.split(",").explode()
    labels = labels[labels != ""]
    return labels.value_counts().reindex(list(CLASSES), fill_value=0).rename("scenarios")
