"""Open-loop benchmark client over live TCP.

Same request stream as the simulated generator, but issued against a real
server: arrivals are paced by the wall clock independent of completions, and
responses are matched to requests by id on a reader thread. Requests still
outstanding after the grace period are recorded as timeouts.
"""

from __future__ import annotations

import json
import socket
import threading
import time

from .kvstore import b64e
from .sim.metrics import MetricRecord, write_csv
from .sim.workload import WorkloadConfig, generate_requests


def run_bench(
    target: tuple[str, int],
    workload: WorkloadConfig,
    seed: int,
    out_path=None,
    grace_s: float = 2.0,
) -> list[MetricRecord]:
    requests = generate_requests(workload, seed)
    sock = socket.create_connection(target, timeout=5.0)
    sock.settimeout(None)
    serving_node = _probe_member_id(target)
    completions: dict[int, tuple[int, str]] = {}
    done = threading.Event()

    def read_loop():
        try:
            with sock.makefile("rb") as reader:
                for line in reader:
                    frame = json.loads(line)
                    if "id" not in frame:
                        continue  # watch pushes have no place in a bench run
                    status = "ok" if frame.get("ok") else "error:" + frame["error"]["code"]
                    completions[frame["id"]] = (time.monotonic_ns() // 1000, status)
                    if len(completions) == len(requests):
                        done.set()
        except (OSError, json.JSONDecodeError):
            done.set()

    threading.Thread(target=read_loop, daemon=True).start()

    issue_us: dict[int, int] = {}
    start = time.monotonic()
    for req in requests:
        delay = start + req.t_s - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        if req.op == "range":
            frame = {"id": req.request_id, "op": "range", "key": b64e(req.key)}
        else:
            frame = {"id": req.request_id, "op": "put", "key": b64e(req.key), "value": b64e(req.value)}
        issue_us[req.request_id] = time.monotonic_ns() // 1000
        sock.sendall(json.dumps(frame).encode() + b"\n")

    done.wait(timeout=grace_s)
    sock.close()

    records = []
    for req in requests:
        issued = issue_us[req.request_id]
        completed = completions.get(req.request_id)
        if completed is None:
            records.append(MetricRecord(req.request_id, req.op, issued, issued, "timeout", serving_node))
        else:
            records.append(
                MetricRecord(req.request_id, req.op, issued, completed[0], completed[1], serving_node)
            )
    if out_path is not None:
        write_csv(out_path, records)
    return records


def _probe_member_id(target: tuple[str, int]) -> int:
    """Ask the target who it is, so records carry the serving node's id."""
    try:
        probe = socket.create_connection(target, timeout=5.0)
        probe.sendall(b'{"id":0,"op":"status"}\n')
        with probe.makefile("rb") as reader:
            frame = json.loads(reader.readline())
        probe.close()
        return int(frame["header"]["member_id"])
    except (OSError, ValueError, KeyError, json.JSONDecodeError):
        return 0
