"""Run reports and their CSV form."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

CSV_COLUMNS = (
    "strategy",
    "budget_bytes",
    "window_k",
    "io_threads",
    "compute_threads",
    "read_mode",
    "tokens",
    "throughput_tps",
    "peak_bytes",
    "io_bytes",
    "io_stall_ns",
    "mem_stall_ns",
)
SWEEP_COLUMNS = CSV_COLUMNS + ("source",)


@dataclass
class RunReport:
    strategy: str
    budget_bytes: int
    window_k: int
    io_threads: int
    compute_threads: int
    read_mode: str
    tokens_generated: int
    wall_time_s: float
    throughput_tokens_per_s: float
    peak_tracked_bytes: int
    io_bytes_total: int
    io_stall_ns: int
    mem_stall_ns: int
    warmup_s: float = 0.0
    # summed over tokens, one entry per layer
    layer_io_stall_ns: tuple[int, ...] = ()
    layer_compute_ns: tuple[int, ...] = ()
    io_requests: int = 0
    source: str = "measured"
    extra: dict = field(default_factory=dict)

    def csv_row(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget_bytes": self.budget_bytes,
            "window_k": self.window_k,
            "io_threads": self.io_threads,
            "compute_threads": self.compute_threads,
            "read_mode": self.read_mode,
            "tokens": self.tokens_generated,
            "throughput_tps": f"{self.throughput_tokens_per_s:.6g}",
            "peak_bytes": self.peak_tracked_bytes,
            "io_bytes": self.io_bytes_total,
            "io_stall_ns": self.io_stall_ns,
            "mem_stall_ns": self.mem_stall_ns,
            "source": self.source,
        }


def format_csv(reports, with_source: bool = False, header: bool = True) -> str:
    columns = SWEEP_COLUMNS if with_source else CSV_COLUMNS
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    if header:
        writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def append_csv(reports, path, with_source: bool = False) -> None:
    """Append rows to ``path``, writing the header only for a new or empty file."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        fh.write(format_csv(reports, with_source=with_source, header=fresh))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
