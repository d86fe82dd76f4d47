"""Per-request metrics capture and latency reporting.

Every issued request gets exactly one record, failures included; latency
percentiles are computed over successful requests only, with failures counted
separately. Percentiles use linear interpolation between order statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

CSV_HEADER = ["request_id", "op", "issue_us", "complete_us", "status", "node"]


@dataclass
class MetricRecord:
    request_id: int
    op: str
    issue_us: int
    complete_us: int
    status: str  # "ok" or "error:<code>" or "timeout"
    node: int

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def latency_ms(self) -> float:
        return (self.complete_us - self.issue_us) / 1000.0


def write_csv(path: str | Path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.request_id, r.op, r.issue_us, r.complete_us, r.status, r.node])


def read_csv(path: str | Path) -> list[MetricRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        for row in reader:
            records.append(
                MetricRecord(
                    request_id=int(row["request_id"]),
                    op=row["op"],
                    issue_us=int(row["issue_us"]),
                    complete_us=int(row["complete_us"]),
                    status=row["status"],
                    node=int(row["node"]),
                )
            )
    return records


def percentile(values, p: float) -> float:
    """p-th percentile with linear interpolation (p50 of 1..100 is 50.5)."""
    if not values:
        raise ValueError("percentile of empty data")
    ordered = sorted(values)
    rank = (len(ordered) - 1) * (p / 100.0)
    lo = int(rank)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (rank - lo)


def _stats(records: list[MetricRecord], window_s: float, start_s: float) -> dict:
    ok = [r for r in records if r.ok]
    latencies = [r.latency_ms for r in ok]
    row = {
        "requests": len(records),
        "successes": len(ok),
        "success_fraction": (len(ok) / len(records)) if records else 1.0,
        "achieved_rate": len(ok) / window_s,
    }
    for name, p in (("p1_ms", 1), ("p50_ms", 50), ("p99_ms", 99)):
        row[name] = round(percentile(latencies, p), 4) if latencies else None
    row["window_s"] = start_s
    return row


def summarize(records: list[MetricRecord], window_s: float = 1.0) -> dict:
    """Overall and per-issue-window stats; achieved rate counts completions.

    Windows are relative to the first issued request, so absolute clock origins
    (live bench runs) and zero-based virtual time report identically.
    """
    if not records:
        return {"overall": _stats([], 1.0, 0.0), "windows": []}
    base_us = min(r.issue_us for r in records)
    span = (max(r.complete_us for r in records) - base_us) / 1e6
    overall = _stats(records, max(span, window_s), 0.0)
    by_window: dict[int, list[MetricRecord]] = {}
    for r in records:
        by_window.setdefault(int((r.issue_us - base_us) / 1e6 / window_s), []).append(r)
    windows = [
        _stats(by_window[idx], window_s, idx * window_s) for idx in sorted(by_window)
    ]
    return {"overall": overall, "windows": windows}


def render_summary(summary: dict) -> str:
    """CSV rendering of summarize() output, one row per window plus 'overall'."""
    cols = ["window_s", "requests", "successes", "success_fraction", "achieved_rate", "p1_ms", "p50_ms", "p99_ms"]
    lines = [",".join(cols)]

    def fmt(row, label=None):
        cells = []
        for col in cols:
            val = label if (col == "window_s" and label) else row[col]
            if isinstance(val, float):
                val = f"{val:.4f}".rstrip("0").rstrip(".")
            cells.append("" if val is None else str(val))
        return ",".join(cells)

    for row in summary["windows"]:
        lines.append(fmt(row))
    lines.append(fmt(summary["overall"], label="overall"))
    return "\n".join(lines) + "\n"
