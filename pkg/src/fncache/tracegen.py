"""Synthetic workload traces and the CSV trace format.

A trace is a CSV of (timestamp_ms, op, key, size_bytes) rows, sorted by
timestamp. The generator draws object popularity from a Zipf law, arrival
times from a Poisson process (so per-object reuse gaps are exponential),
and object sizes log-uniformly within the profile's band. An object's
first appearance is a PUT; later ones are GETs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

HEADER = ("timestamp_ms", "op", "key", "size_bytes")

# size bands, bytes (decimal units to match network accounting)
PROFILES = {
    "large-only": (10_000_000, 1_000_000_000),
    "mixed": (1_000, 1_000_000_000),
}


class TraceError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class TraceRecord:
    timestamp_ms: int
    op: str  # GET | PUT
    key: str
    size_bytes: int

    def __post_init__(self):
        if self.op not in ("GET", "PUT"):
            raise TraceError(f"unknown op {self.op!r}")
        if self.timestamp_ms < 0:
            raise TraceError("negative timestamp")
        if self.size_bytes <= 0:
            raise TraceError("size_bytes must be positive")


def generate_trace(profile: str, hours: float, seed: int, *,
                   n_objects: int = 1000, events_per_hour: int = 2000,
                   skew: float = 1.0) -> list[TraceRecord]:
    """Deterministic synthetic trace: same arguments, same records."""
    if profile not in PROFILES:
        raise TraceError(f"unknown profile {profile!r}")
    if hours <= 0 or n_objects < 1 or events_per_hour < 1:
        raise TraceError("hours, n_objects and events_per_hour must be positive")
    lo, hi = PROFILES[profile]
    rng = np.random.Generator(np.random.PCG64(seed))

    sizes = np.exp(rng.uniform(math.log(lo), math.log(hi), n_objects))
    sizes = np.clip(sizes.astype(np.int64), lo, hi)

    # long-tail popularity over object ranks
    weights = 1.0 / np.arange(1, n_objects + 1, dtype=np.float64) ** skew
    pmf = weights / weights.sum()

    n_events = int(round(hours * events_per_hour))
    horizon_ms = hours * 3_600_000.0
    gaps = rng.exponential(horizon_ms / n_events, n_events)
    stamps = np.minimum(np.cumsum(gaps), horizon_ms - 1).astype(np.int64)
    ranks = rng.choice(n_objects, size=n_events, p=pmf)

    width = len(str(n_objects - 1))
    records = []
    seen = set()
    for ts, rank in zip(stamps, ranks):
        key = f"obj{rank:0{width}d}"
        op = "GET" if rank in seen else "PUT"
        seen.add(rank)
        records.append(TraceRecord(int(ts), op, key, int(sizes[rank])))
    return records


def popularity_share(records, top_frac: float = 0.01) -> float:
    """Fraction of GETs landing on the most-popular top_frac of keys."""
    gets: dict[str, int] = {}
    for r in records:
        if r.op == "GET":
            gets[r.key] = gets.get(r.key, 0) + 1
    if not gets:
        return 0.0
    counts = sorted(gets.values(), reverse=True)
    k = max(1, int(len(counts) * top_frac))
    return sum(counts[:k]) / sum(counts)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def dump_trace(records, fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(HEADER)
    for r in records:
        w.writerow((r.timestamp_ms, r.op, r.key, r.size_bytes))


def write_trace(records, path: str) -> None:
    with open(path, "w", newline="") as fp:
        dump_trace(records, fp)


def parse_trace(fp) -> list[TraceRecord]:
    """Parse a trace CSV. The header row is optional. Raises TraceError
    with the offending line number on malformed input."""
    records: list[TraceRecord] = []
    prev_ts = -1
    for line_no, row in enumerate(csv.reader(fp), start=1):
        if not row:
            continue
        if line_no == 1 and tuple(row) == HEADER:
            continue
        if len(row) != 4:
            raise TraceError(f"expected 4 fields, got {len(row)}", line_no)
        ts_s, op, key, size_s = row
        try:
            ts, size = int(ts_s), int(size_s)
        except ValueError:
            raise TraceError(f"non-integer field in {row!r}", line_no) from None
        try:
            rec = TraceRecord(ts, op.strip().upper(), key, size)
        except TraceError as exc:
            raise TraceError(str(exc), line_no) from None
        if rec.timestamp_ms < prev_ts:
            raise TraceError("timestamps must be non-decreasing", line_no)
        prev_ts = rec.timestamp_ms
        records.append(rec)
    return records


def read_trace(path: str) -> list[TraceRecord]:
    with open(path, newline="") as fp:
        return parse_trace(fp)


def trace_to_text(records) -> str:
    buf = io.StringIO()
    dump_trace(records, buf)
    return buf.getvalue()
