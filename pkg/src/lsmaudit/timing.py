"""Small timing helpers shared by the benchmark entry points."""

from __future__ import annotations

import statistics
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class BenchRow:
    name: str
    mean: float  # nanoseconds per event
    p50: float
    p99: float
    events: int
    workload: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def percentile(sorted_values: Sequence[float], q: float) -> float:
    if not sorted_values:
        return 0.0
    k = min(len(sorted_values) - 1, max(0, round(q * (len(sorted_values) - 1))))
    return float(sorted_values[k])


def summarize(name: str, samples: Sequence[float], workload: str = "") -> BenchRow:
    ordered = sorted(samples)
    mean = statistics.fmean(ordered) if ordered else 0.0
    return BenchRow(name, mean, percentile(ordered, 0.5), percentile(ordered, 0.99), len(ordered), workload)


def time_batches(fn: Callable[[], object], batch: int, repeats: int) -> list[float]:
    """Per-call nanoseconds for ``repeats`` batches of ``batch`` calls each."""
    out = []
    clock = time.perf_counter_ns
    for _ in range(repeats):
        t0 = clock()
        for _ in range(batch):
            fn()
        out.append((clock() - t0) / batch)
    return out
