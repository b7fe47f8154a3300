"""Machine-readable run outputs: metrics.csv, timeline.jsonl and summary.json."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from team.errors import InputError
from team.federation import Timeline, traffic_compare

METRIC_COLUMNS = ("stage", "round", "device_id", "metric", "value", "units")

_DEVICE_METRICS = (("loss", "nats"), ("accuracy", "fraction"), ("eval_accuracy", "fraction"),
                   ("steps", "count"), ("bytes_down", "bytes"), ("bytes_up", "bytes"))
_GLOBAL_METRICS = (("global_accuracy", "accuracy", "fraction"), ("bytes_down", "bytes_down", "bytes"),
                   ("bytes_down_shared", "bytes_down_shared", "bytes"), ("bytes_up", "bytes_up", "bytes"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsTable:
    """Append-only rows in the fixed column order."""

    def __init__(self):
        self.rows = []

    def add(self, stage, t, device_id, metric, value, units):
        if value is None:
            return
        self.rows.append((stage, "" if t is None else t, device_id, metric, value, units))

    def add_timeline(self, stage, timeline: Timeline):
        for r in timeline.reports:
            for d in r.devices:
                for metric, units in _DEVICE_METRICS:
                    self.add(stage, r.t, d["device_id"], metric, d.get(metric), units)
            for attr, metric, units in _GLOBAL_METRICS:
                self.add(stage, r.t, "global", metric, getattr(r, attr), units)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _write(path: Path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def timeline_summary(timeline: Timeline, baseline: Timeline | None = None) -> dict:
    reports = timeline.reports
    out = {
        "rounds": len(reports),
        "final_global_accuracy": reports[-1].global_accuracy,
        "bytes_up_total": sum(r.bytes_up for r in reports),
        "bytes_down_total": sum(r.bytes_down for r in reports),
        "no_op_rounds": [r.t for r in reports if r.no_op],
    }
    if baseline is not None:
        traffic = traffic_compare(timeline, baseline)
        out.update(uplink_ratio=traffic.uplink_ratio, downlink_ratio=traffic.downlink_ratio,
                   baseline_final_accuracy=baseline.reports[-1].global_accuracy, traffic=traffic.to_dict())
    return out


def emit_reports(out_dir, timeline: Timeline | None = None, baseline: Timeline | None = None,
                 stage: str = "federate", metrics: MetricsTable | None = None, summary: dict | None = None):
    """Write the run's output files; returns the list of paths written."""
    if timeline is not None and not timeline.reports:
        raise InputError("cannot report an empty timeline")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = metrics or MetricsTable()
    full = {"stage": stage}
    written = []
    if timeline is not None:
        table.add_timeline(stage, timeline)
        timeline.write(out / "timeline.jsonl")
        written.append(out / "timeline.jsonl")
        full.update(timeline_summary(timeline, baseline))
    if baseline is not None:
        table.add_timeline(f"{stage}-fedavg", baseline)
        baseline.write(out / "baseline_timeline.jsonl")
        written.append(out / "baseline_timeline.jsonl")
        for row in full.get("traffic", {}).get("per_round", []):
            table.add(stage, row["t"], "global", "uplink_ratio", row["uplink_ratio"], "ratio")
            table.add(stage, row["t"], "global", "downlink_ratio", row["downlink_ratio"], "ratio")
    full.update(summary or {})
    _write(out / "metrics.csv", table.to_csv())
    _write(out / "summary.json", dump_json(full))
    return written + [out / "metrics.csv", out / "summary.json"]
