"""Open-loop YCSB-A-shaped workload: fixed-interval arrivals, half updates and
half reads, keys drawn uniformly. Arrival times never depend on completions, so
an overloaded server shows up as queueing latency rather than reduced load."""

from __future__ import annotations

import random
from dataclasses import dataclass


@dataclass
class WorkloadConfig:
    rate: float = 1000.0  # requests per second
    duration_s: float = 5.0
    read_fraction: float = 0.5
    key_count: int = 100
    key_size: int = 18
    value_size: int = 32

    def validate(self) -> "WorkloadConfig":
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read_fraction must be in [0, 1]")
        if min(self.key_count, self.key_size, self.value_size) < 1:
            raise ValueError("key_count, key_size and value_size must be >= 1")
        return self


@dataclass
class Request:
    request_id: int
    t_s: float  # scheduled arrival on the open-loop clock
    op: str  # "put" | "range"
    key: bytes
    value: bytes | None = None


def generate_requests(cfg: WorkloadConfig, seed: int) -> list[Request]:
    cfg.validate()
    rng = random.Random(f"{seed}:workload")
    keys = [rng.randbytes(cfg.key_size) for _ in range(cfg.key_count)]
    total = int(round(cfg.rate * cfg.duration_s))
    requests = []
    for i in range(total):
        if rng.random() < cfg.read_fraction:
            op, value = "range", None
        else:
            op, value = "put", rng.randbytes(cfg.value_size)
        requests.append(
            Request(
                request_id=i,
                t_s=i / cfg.rate,
                op=op,
                key=keys[rng.randrange(cfg.key_count)],
                value=value,
            )
        )
    return requests
