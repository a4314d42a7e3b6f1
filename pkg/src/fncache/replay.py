"""Trace replay over the full simulated stack.

build_cache_system wires nodes, proxy, client and backing store from one
SystemConfig; ReplayEngine feeds a trace through the client with bounded
concurrency (per-key ordering preserved) and emits a RunReport whose cost
series is cross-checked, record by record, against the billing meter.
"""

from __future__ import annotations

import time as _time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .analytics import ceil_100
from .client import CacheClient, SyntheticStore
from .config import SystemConfig
from .node import NodeRuntime
from .proxy import Proxy
from .sim import FunctionSpec, Simulation
from .tracegen import TraceRecord

MS_PER_HOUR = 3_600_000


class ReplayError(Exception):
    pass


@dataclass
class CacheSystem:
    sim: Simulation
    cfg: SystemConfig
    proxy: Proxy
    client: CacheClient
    backing: SyntheticStore
    node_ids: list
    node_handles: dict


def build_cache_system(sim: Simulation, cfg: SystemConfig, *,
                       backing=None, service_delay_fn=None,
                       node_prefix: str = "node", proxy_addr: str = "proxy0",
                       start_warmup: bool = True) -> CacheSystem:
    """Assemble one pool: cfg.pool_size cache-node functions, a proxy over
    them, and a client with a deterministic synthetic origin."""
    width = max(3, len(str(cfg.pool_size - 1)))
    ids = [f"{node_prefix}{i:0{width}d}" for i in range(cfg.pool_size)]
    handles: dict = {}

    def make_factory(nid):
        def factory(ctx):
            rt = NodeRuntime(
                ctx,
                buffer_ms=cfg.buffer_ms,
                t_bak_ms=int(cfg.t_bak_s * 1000),
                backup_enabled=cfg.backup_enabled,
                service_delay_fn=service_delay_fn)
            handles.setdefault(nid, []).append((ctx.replica_index, rt))
            return rt
        return factory

    for nid in ids:
        sim.provider.register(
            FunctionSpec(nid, memory_mb=cfg.lambda_memory_mb),
            make_factory(nid))
    proxy = Proxy(sim, cfg, ids, addr=proxy_addr)
    if backing is None:
        backing = SyntheticStore()
    client = CacheClient([proxy], cfg, backing=backing)
    if start_warmup and cfg.t_warm_s > 0:
        proxy.start_warmup_scheduler()
    return CacheSystem(sim, cfg, proxy, client, backing, ids, handles)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    gets: int
    hits: int
    misses: int
    resets: int
    losses: int
    puts: int
    hit_ratio: float
    latency_ms: dict
    hourly_cost: list
    hourly_availability: list
    reclaim_events: list
    invocations: dict
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gets": self.gets,
            "hits": self.hits,
            "misses": self.misses,
            "resets": self.resets,
            "losses": self.losses,
            "puts": self.puts,
            "hit_ratio": self.hit_ratio,
            "latency_ms": self.latency_ms,
            "hourly_cost": self.hourly_cost,
            "hourly_availability": self.hourly_availability,
            "reclaim_events": self.reclaim_events,
            "invocations": self.invocations,
            "errors": self.errors,
        }


def _percentiles(samples) -> dict:
    if not samples:
        return {"p50": 0.0, "p90": 0.0, "p99": 0.0, "max": 0.0}
    arr = np.asarray(samples, dtype=np.float64)
    p50, p90, p99 = np.percentile(arr, [50, 90, 99])
    return {"p50": float(p50), "p90": float(p90), "p99": float(p99),
            "max": float(arr.max())}


_PURPOSE_BUCKET = {"serve": "c_ser", "warmup": "c_w", "backup": "c_bak"}


def cost_series(sim: Simulation, cfg: SystemConfig) -> list:
    """Per-hour dollar breakdown recomputed from raw billing records."""
    hours: dict[int, dict] = {}
    for rec in sim.provider.meter.records:
        if rec.billed_ms != ceil_100(rec.duration_ms):
            raise ReplayError(
                f"billing drift on {rec.instance_id}: "
                f"{rec.billed_ms} != ceil100({rec.duration_ms})")
        bucket = _PURPOSE_BUCKET.get(rec.purpose)
        if bucket is None:
            raise ReplayError(f"unknown billing purpose {rec.purpose!r}")
        dollars = cfg.c_req + rec.gb_seconds * cfg.c_dur
        h = rec.start_ms // MS_PER_HOUR
        row = hours.setdefault(
            h, {"hour": h, "c_ser": 0.0, "c_w": 0.0, "c_bak": 0.0})
        row[bucket] += dollars
    out = [hours[h] for h in sorted(hours)]
    for row in out:
        row["total"] = row["c_ser"] + row["c_w"] + row["c_bak"]
    return out


def _check_meter_closure(sim: Simulation, cfg: SystemConfig, series) -> None:
    # the series must equal the meter's own aggregation exactly
    meter = sim.provider.meter
    for purpose, bucket in _PURPOSE_BUCKET.items():
        from_series = sum(row[bucket] for row in series)
        from_meter = (meter.invocation_count(purpose) * cfg.c_req
                      + meter.gb_seconds(purpose) * cfg.c_dur)
        if abs(from_series - from_meter) > 1e-9 * max(1.0, abs(from_meter)):
            raise ReplayError(
                f"cost series desync for {purpose}: "
                f"{from_series} != {from_meter}")


class ReplayEngine:
    """Feeds trace records to the client at their timestamps with at most
    `window` requests in flight; same-key requests never overlap."""

    def __init__(self, system: CacheSystem, records, *, window=None):
        self.sys = system
        self.records = list(records)
        self.window = window if window is not None else system.cfg.window
        if self.window < 1:
            raise ReplayError("window must be >= 1")
        self._ready: list[TraceRecord] = []
        self._busy: set[str] = set()
        self._in_flight = 0
        self._arrived = 0
        self._latency = {"GET": [], "PUT": []}
        self._get_keys_by_hour: dict[int, set] = {}
        self.errors: list[str] = []

    # -- feeding -----------------------------------------------------------

    def _arrive(self, rec: TraceRecord) -> None:
        self._arrived += 1
        self._ready.append(rec)
        self._drain()

    def _drain(self) -> None:
        i = 0
        while self._in_flight < self.window and i < len(self._ready):
            rec = self._ready[i]
            if rec.key in self._busy:
                i += 1  # keep per-key order; later keys may pass
                continue
            self._ready.pop(i)
            self._issue(rec)

    def _issue(self, rec: TraceRecord) -> None:
        loop = self.sys.sim.loop
        self._busy.add(rec.key)
        self._in_flight += 1
        t0 = loop.now
        self.sys.backing.set_size(rec.key, rec.size_bytes)
        if rec.op == "PUT":
            fut = self.sys.client.put(rec.key, self.sys.backing.fetch(rec.key))
        else:
            self._get_keys_by_hour.setdefault(
                t0 // MS_PER_HOUR, set()).add(rec.key)
            fut = self.sys.client.get(rec.key)
        fut.add_done_callback(lambda f: self._finish(rec, t0, f))

    def _finish(self, rec: TraceRecord, t0: int, fut) -> None:
        self._latency[rec.op].append(self.sys.sim.loop.now - t0)
        if fut.error is not None:
            self.errors.append(f"{rec.op} {rec.key}: {fut.error}")
        self._in_flight -= 1
        self._busy.discard(rec.key)
        self._drain()

    @property
    def done(self) -> bool:
        return (self._arrived == len(self.records)
                and not self._ready and self._in_flight == 0)

    # -- driving -----------------------------------------------------------

    def run(self, *, settle_ms: int = 5_000, pace: bool = False) -> RunReport:
        sim = self.sys.sim
        for rec in self.records:
            if rec.timestamp_ms < sim.loop.now:
                raise ReplayError("trace starts in the past")
            sim.loop.call_at(rec.timestamp_ms, self._arrive, rec)
        limit = max((r.timestamp_ms for r in self.records), default=0)
        limit += MS_PER_HOUR
        wall0 = _time.monotonic()
        virt0 = sim.loop.now
        while not self.done:
            nxt = sim.loop.peek()
            if nxt is None:
                raise ReplayError("event loop idle with requests pending")
            if nxt > limit:
                raise ReplayError("replay stalled; trace never completed")
            if pace:
                lag = (nxt - virt0) / 1000.0 - (_time.monotonic() - wall0)
                if lag > 0:
                    _time.sleep(lag)
            sim.loop.step()
        self.sys.proxy.stop_warmup_scheduler()
        sim.run_until(sim.loop.now + settle_ms)
        return self._report()

    # -- reporting ---------------------------------------------------------

    def _report(self) -> RunReport:
        sim, cfg = self.sys.sim, self.sys.cfg
        client = self.sys.client
        client.check_stats()
        self.sys.proxy.check_consistency()
        stats = client.stats

        # every reset must trace back to a loss, a refetch and a re-insert
        reset_events = [e for e in client.events if e[1] == "reset"]
        if len(reset_events) != stats["resets"]:
            raise ReplayError("reset audit log disagrees with counters")
        if stats["resets"] > stats["losses"]:
            raise ReplayError("more resets than observed losses")

        series = cost_series(sim, cfg)
        _check_meter_closure(sim, cfg, series)

        resets_by_hour: dict[int, set] = {}
        for at, _kind, key in reset_events:
            resets_by_hour.setdefault(at // MS_PER_HOUR, set()).add(key)
        availability = []
        for h in sorted(self._get_keys_by_hour):
            read = self._get_keys_by_hour[h]
            lost = resets_by_hour.get(h, set()) & read
            availability.append({
                "hour": h,
                "keys_read": len(read),
                "keys_lost": len(lost),
                "availability": 1.0 - len(lost) / len(read),
            })

        gets = stats["gets"]
        meter = sim.provider.meter
        purposes = Counter(r.purpose for r in meter.records)
        return RunReport(
            gets=gets,
            hits=stats["hits"],
            misses=stats["misses"],
            resets=stats["resets"],
            losses=stats["losses"],
            puts=stats["puts"],
            hit_ratio=(stats["hits"] / gets) if gets else 0.0,
            latency_ms={op: _percentiles(v)
                        for op, v in sorted(self._latency.items())},
            hourly_cost=series,
            hourly_availability=availability,
            reclaim_events=[
                {"at_ms": at, "reclaimed": len(ids)}
                for at, ids in sim.provider.reclaim_log
            ],
            invocations=dict(sorted(purposes.items())),
            errors=list(self.errors),
        )


def replay_trace(cfg: SystemConfig, records, *, pace: bool = False,
                 backing=None) -> RunReport:
    """One-call convenience: fresh simulation, full stack, run, report."""
    sim = Simulation(cfg)
    system = build_cache_system(sim, cfg, backing=backing)
    return ReplayEngine(system, records).run(pace=pace)
