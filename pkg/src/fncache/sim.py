"""Deterministic FaaS provider simulation.

Single-threaded event loop over integer-millisecond virtual time. All
randomness flows from one generator seeded by the config, so a run is a pure
function of (config, submitted work). Realtime mode paces the same event
sequence against the wall clock; it does not open real sockets.

Units: network bandwidth uses MB = 1e6 bytes (matching how link throughput
is quoted); billing memory uses GB = 1024 MB (matching how function memory
is priced, so a 1536 MB function bills at 1.5 GB).
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
import time as _time
from dataclasses import dataclass
from enum import Enum

from .analytics import DiscreteSampler, ceil_100
from .wire import decode_frame, encode_frame, frame_len


class SimError(Exception):
    pass


class ConnectError(SimError):
    pass


class SimTimeout(SimError):
    pass


# --------------------------------------------------------------------------
# event loop
# --------------------------------------------------------------------------


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when, fn, args):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class EventLoop:
    """Heap-ordered timers; ties broken by submission order."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()
        self.now = 0

    def call_at(self, when, fn, *args) -> Timer:
        when = int(when)
        if when < self.now:
            raise SimError(f"call_at({when}) in the past (now={self.now})")
        t = Timer(when, fn, args)
        heapq.heappush(self._heap, (when, next(self._seq), t))
        return t

    def call_later(self, delay, fn, *args) -> Timer:
        return self.call_at(self.now + int(delay), fn, *args)

    def peek(self):
        """Time of the next live event, or None."""
        while self._heap:
            when, _, t = self._heap[0]
            if t.cancelled:
                heapq.heappop(self._heap)
                continue
            return when
        return None

    def step(self) -> bool:
        """Run the single next event. Returns False if none remain."""
        while self._heap:
            when, _, t = heapq.heappop(self._heap)
            if t.cancelled:
                continue
            self.now = when
            t.fn(*t.args)
            return True
        return False

    def run_until(self, t: int):
        """Run every event due at or before t; clock ends at exactly t."""
        t = int(t)
        if t < self.now:
            raise SimError("cannot run backwards")
        while True:
            nxt = self.peek()
            if nxt is None or nxt > t:
                break
            self.step()
        self.now = t

    def run_until_idle(self, max_events=1_000_000):
        for _ in range(max_events):
            if not self.step():
                return
        raise SimError(f"still busy after {max_events} events")


class SimFuture:
    """Single-assignment result slot resolved inside the event loop."""

    __slots__ = ("_value", "_error", "_done", "_callbacks")

    def __init__(self):
        self._value = None
        self._error = None
        self._done = False
        self._callbacks = []

    @property
    def done(self) -> bool:
        return self._done

    def set_result(self, value):
        if self._done:
            raise SimError("future already resolved")
        self._value = value
        self._done = True
        for cb in self._callbacks:
            cb(self)
        self._callbacks.clear()

    def set_error(self, exc: Exception):
        if self._done:
            raise SimError("future already resolved")
        self._error = exc
        self._done = True
        for cb in self._callbacks:
            cb(self)
        self._callbacks.clear()

    def result(self):
        if not self._done:
            raise SimError("future not resolved")
        if self._error is not None:
            raise self._error
        return self._value

    @property
    def error(self):
        return self._error

    def add_done_callback(self, cb):
        if self._done:
            cb(self)
        else:
            self._callbacks.append(cb)


# --------------------------------------------------------------------------
# transport
# --------------------------------------------------------------------------


class Uplink:
    """Per-sender FIFO egress pipe. bytes_per_ms=None means unconstrained
    (proxy, relay, client). Transfers serialize: a frame departs when the
    pipe frees up, so one B-byte send on an idle W MB/s link takes exactly
    ceil(B / (W * 1000 B/ms)) ms."""

    __slots__ = ("bytes_per_ms", "busy_until")

    def __init__(self, bytes_per_ms: float | None = None):
        self.bytes_per_ms = bytes_per_ms
        self.busy_until = 0

    def departure(self, now: int, nbytes: int) -> int:
        if self.bytes_per_ms is None:
            return now
        start = max(now, self.busy_until)
        self.busy_until = start + max(1, math.ceil(nbytes / self.bytes_per_ms))
        return self.busy_until


class Channel:
    """One end of a duplex in-sim connection carrying wire messages."""

    __slots__ = ("net", "peer", "uplink", "owner", "label",
                 "on_message", "on_close", "open", "bytes_sent")

    def __init__(self, net, uplink, owner, label):
        self.net = net
        self.peer: Channel | None = None
        self.uplink = uplink or Uplink()
        self.owner = owner  # Instance or None for unconstrained endpoints
        self.label = label
        self.on_message = None
        self.on_close = None
        self.open = True
        self.bytes_sent = 0

    def send(self, msg) -> None:
        """Fire-and-forget. Sends into a closed or dead channel vanish, as do
        deliveries to a peer whose instance is no longer running."""
        if not self.open:
            return
        if self.owner is not None and not self.owner.is_running:
            return
        nbytes = frame_len(msg)
        self.bytes_sent += nbytes
        loop = self.net.loop
        depart = self.uplink.departure(loop.now, nbytes)
        loop.call_at(depart + self.net.latency_ms, self._deliver, msg)

    def _deliver(self, msg):
        peer = self.peer
        if peer is None or not peer.open:
            return
        if peer.owner is not None and not peer.owner.is_running:
            return
        if self.net.wire_check:
            out, rest = decode_frame(encode_frame(msg))
            assert out == msg and rest == b"", f"wire round-trip broke: {msg!r}"
        if peer.on_message is not None:
            peer.on_message(peer, msg)

    def close(self, notify=True):
        if not self.open:
            return
        self.open = False
        peer = self.peer
        if notify and peer is not None and peer.open:
            # do not let the close overtake frames still in our pipe
            loop = self.net.loop
            flushed = loop.now
            if self.uplink.bytes_per_ms is not None:
                flushed = max(flushed, self.uplink.busy_until)
            loop.call_at(flushed + self.net.latency_ms, self._close_peer)

    def _close_peer(self):
        peer = self.peer
        if peer is None or not peer.open:
            return
        peer.open = False
        if peer.on_close is not None:
            peer.on_close(peer)

    def __repr__(self):
        state = "open" if self.open else "closed"
        return f"<Channel {self.label} {state}>"


class Network:
    """Address registry plus the shared latency/validation knobs."""

    def __init__(self, loop: EventLoop, latency_ms=1, wire_check=False):
        self.loop = loop
        self.latency_ms = int(latency_ms)
        self.wire_check = wire_check
        self._listeners: dict = {}

    def listen(self, addr: str, acceptor) -> None:
        if addr in self._listeners:
            raise SimError(f"address already bound: {addr}")
        self._listeners[addr] = acceptor

    def unlisten(self, addr: str) -> None:
        self._listeners.pop(addr, None)

    def dial(self, addr: str, *, uplink=None, owner=None, label="") -> Channel:
        acceptor = self._listeners.get(addr)
        if acceptor is None:
            raise ConnectError(f"nothing listening at {addr}")
        near = Channel(self, uplink, owner, label or f"->{addr}")
        far = Channel(self, None, None, f"{addr}<-{label}")
        near.peer = far
        far.peer = near
        self.loop.call_later(self.latency_ms, acceptor, far)
        return near


# --------------------------------------------------------------------------
# provider
# --------------------------------------------------------------------------

MEMORY_MIN_MB = 128
MEMORY_MAX_MB = 3008
MEMORY_STEP_MB = 64
# measured link speed scales roughly linearly with configured memory
BANDWIDTH_AT_MIN = 50.0    # MB/s at 128 MB
BANDWIDTH_AT_MAX = 160.0   # MB/s at 3008 MB


@dataclass(frozen=True)
class FunctionSpec:
    function_id: str
    memory_mb: int = 1536
    max_duration_s: int = 900

    def __post_init__(self):
        mb = self.memory_mb
        if not (MEMORY_MIN_MB <= mb <= MEMORY_MAX_MB) or (mb - MEMORY_MIN_MB) % MEMORY_STEP_MB:
            raise ValueError("memory_mb must be in 128..3008 step 64")
        if not (0 < self.max_duration_s <= 900):
            raise ValueError("max_duration_s must be in 1..900")

    @property
    def bandwidth_mbps(self) -> float:
        span = MEMORY_MAX_MB - MEMORY_MIN_MB
        frac = (self.memory_mb - MEMORY_MIN_MB) / span
        return BANDWIDTH_AT_MIN + (BANDWIDTH_AT_MAX - BANDWIDTH_AT_MIN) * frac

    @property
    def bytes_per_ms(self) -> float:
        return self.bandwidth_mbps * 1000.0

    @property
    def billing_gb(self) -> float:
        return self.memory_mb / 1024.0


class InstanceState(Enum):
    RUNNING = "running"
    WARM_IDLE = "warm_idle"
    DESTROYED = "destroyed"


class Instance:
    def __init__(self, spec: FunctionSpec, replica_index: int, generation: int):
        self.spec = spec
        self.function_id = spec.function_id
        self.replica_index = replica_index
        self.instance_id = f"{spec.function_id}.{replica_index}#{generation}"
        self.state = InstanceState.RUNNING
        self.uplink = Uplink(spec.bytes_per_ms)
        self.runtime = None
        self.memory_used = 0  # maintained by the guest runtime's store
        self.running_since: int | None = None
        self.purpose = "serve"
        self.channels: list[Channel] = []
        self.timers: list[Timer] = []
        self.kill_timer: Timer | None = None

    @property
    def is_running(self) -> bool:
        return self.state is InstanceState.RUNNING

    def __repr__(self):
        return f"<Instance {self.instance_id} {self.state.value}>"


class InstanceContext:
    """Capabilities available to code running inside an instance."""

    def __init__(self, provider: "Provider", instance: Instance):
        self._provider = provider
        self._inst = instance

    @property
    def instance_id(self) -> str:
        return self._inst.instance_id

    @property
    def node_id(self) -> str:
        return self._inst.function_id

    @property
    def replica_index(self) -> int:
        return self._inst.replica_index

    @property
    def capacity_bytes(self) -> int:
        return self._provider.capacity_bytes(self._inst.spec)

    @property
    def is_running(self) -> bool:
        return self._inst.is_running

    @property
    def now(self) -> int:
        return self._provider.loop.now

    def set_memory_used(self, nbytes: int) -> None:
        self._inst.memory_used = nbytes

    def dial(self, addr: str, label="") -> Channel:
        if not self._inst.is_running:
            raise SimError("dial from a non-running instance")
        ch = self._provider.network.dial(
            addr, uplink=self._inst.uplink, owner=self._inst,
            label=label or self._inst.instance_id)
        self._inst.channels.append(ch)
        return ch

    def call_later(self, delay, fn, *args) -> Timer:
        if not self._inst.is_running:
            raise SimError("timer from a non-running instance")
        t = self._provider.loop.call_later(delay, fn, *args)
        self._inst.timers.append(t)
        return t

    def invoke(self, function_id: str, params: dict | None = None,
               replica_index: int | None = None, purpose="serve") -> str:
        """Invoke another function (or replica) through the provider."""
        if not self._inst.is_running:
            raise SimError("invoke from a non-running instance")
        return self._provider.invoke(function_id, params,
                                     replica_index=replica_index,
                                     purpose=purpose)

    def finish(self) -> None:
        self._provider._finish(self._inst)


@dataclass(frozen=True)
class BillRecord:
    instance_id: str
    function_id: str
    purpose: str
    start_ms: int
    duration_ms: int
    billed_ms: int
    memory_mb: int

    @property
    def gb_seconds(self) -> float:
        return self.billed_ms / 1000.0 * (self.memory_mb / 1024.0)


class BillingMeter:
    def __init__(self):
        self.records: list[BillRecord] = []

    def bill(self, instance: Instance, start_ms: int, duration_ms: int,
             purpose: str) -> BillRecord:
        if duration_ms < 0:
            raise SimError("negative duration")
        rec = BillRecord(
            instance_id=instance.instance_id,
            function_id=instance.function_id,
            purpose=purpose,
            start_ms=start_ms,
            duration_ms=duration_ms,
            billed_ms=ceil_100(duration_ms),
            memory_mb=instance.spec.memory_mb,
        )
        self.records.append(rec)
        return rec

    @property
    def invocations(self) -> int:
        return len(self.records)

    def gb_seconds(self, purpose: str | None = None) -> float:
        return sum(r.gb_seconds for r in self.records
                   if purpose is None or r.purpose == purpose)

    def invocation_count(self, purpose: str | None = None) -> int:
        if purpose is None:
            return len(self.records)
        return sum(1 for r in self.records if r.purpose == purpose)


class _Function:
    __slots__ = ("spec", "factory", "replicas", "generation")

    def __init__(self, spec, factory):
        self.spec = spec
        self.factory = factory
        self.replicas: dict[int, Instance] = {}
        self.generation = 0


class Provider:
    """Warm-instance cache, invocation and auto-scaling, reclamation,
    billing. Guest code interacts only through InstanceContext."""

    def __init__(self, loop: EventLoop, network: Network, meter: BillingMeter,
                 rng: random.Random, *, capacity_fraction=0.875,
                 warm_latency_ms=13, cold_latency_ms=150):
        self.loop = loop
        self.network = network
        self.meter = meter
        self.rng = rng
        self.capacity_fraction = capacity_fraction
        self.warm_latency_ms = warm_latency_ms
        self.cold_latency_ms = cold_latency_ms
        self._functions: dict[str, _Function] = {}
        self._instances: dict[str, Instance] = {}
        self._sampler: DiscreteSampler | None = None
        self.reclaim_log: list[tuple[int, tuple[str, ...]]] = []
        self.cold_starts = 0
        self.warm_starts = 0

    # -- registration ------------------------------------------------------

    def register(self, spec: FunctionSpec, runtime_factory) -> None:
        if spec.function_id in self._functions:
            raise SimError(f"function already registered: {spec.function_id}")
        self._functions[spec.function_id] = _Function(spec, runtime_factory)

    def capacity_bytes(self, spec: FunctionSpec) -> int:
        return int(spec.memory_mb * 1_000_000 * self.capacity_fraction)

    def set_reclaim_pmf(self, pmf) -> None:
        self._sampler = DiscreteSampler(pmf) if pmf is not None else None

    # -- invocation --------------------------------------------------------

    def invoke(self, function_id: str, params: dict | None = None,
               replica_index: int | None = None, purpose="serve") -> str:
        """Start (or wake) an instance; returns its instance_id immediately.
        The guest's on_invoke runs after warm/cold start latency."""
        fn = self._functions.get(function_id)
        if fn is None:
            raise SimError(f"unknown function: {function_id}")

        inst = None
        if replica_index is None:
            idle = [i for i in fn.replicas.values()
                    if i.state is InstanceState.WARM_IDLE]
            if idle:
                inst = min(idle, key=lambda i: i.replica_index)
        else:
            existing = fn.replicas.get(replica_index)
            if existing is not None and existing.state is InstanceState.WARM_IDLE:
                inst = existing
            elif existing is None:
                inst = self._cold_start(fn, replica_index)
            # existing is Running: fall through to auto-scale below

        if inst is None:
            inst = self._cold_start(fn, self._lowest_free_index(fn))
        elif inst.state is InstanceState.WARM_IDLE:
            inst.state = InstanceState.RUNNING
            self.warm_starts += 1
            self.loop.call_later(self.warm_latency_ms,
                                 self._begin, inst, params or {}, purpose)
            return inst.instance_id
        # inst came from _cold_start
        self.loop.call_later(self.cold_latency_ms,
                             self._begin, inst, params or {}, purpose)
        return inst.instance_id

    def _lowest_free_index(self, fn: _Function) -> int:
        i = 0
        while i in fn.replicas:
            i += 1
        return i

    def _cold_start(self, fn: _Function, replica_index: int) -> Instance:
        fn.generation += 1
        inst = Instance(fn.spec, replica_index, fn.generation)
        fn.replicas[replica_index] = inst
        self._instances[inst.instance_id] = inst
        self.cold_starts += 1
        return inst

    def _begin(self, inst: Instance, params: dict, purpose: str):
        if inst.state is not InstanceState.RUNNING:
            return  # destroyed by a test hook before start
        inst.running_since = self.loop.now
        inst.purpose = purpose
        fn = self._functions[inst.function_id]
        if inst.runtime is None:
            inst.runtime = fn.factory(InstanceContext(self, inst))
        limit = inst.spec.max_duration_s * 1000
        inst.kill_timer = self.loop.call_later(limit, self._force_kill, inst)
        inst.runtime.on_invoke(params)

    def _finish(self, inst: Instance):
        if inst.state is not InstanceState.RUNNING:
            raise SimError(f"finish on {inst}")
        duration = self.loop.now - inst.running_since
        self.meter.bill(inst, inst.running_since, duration, inst.purpose)
        inst.state = InstanceState.WARM_IDLE
        inst.running_since = None
        self._quiesce(inst)

    def _force_kill(self, inst: Instance):
        # provider-side duration cap; bills the full capped run
        if inst.state is not InstanceState.RUNNING:
            return
        duration = self.loop.now - inst.running_since
        self.meter.bill(inst, inst.running_since, duration, inst.purpose)
        self._destroy(inst)

    def _quiesce(self, inst: Instance):
        if inst.kill_timer is not None:
            inst.kill_timer.cancel()
            inst.kill_timer = None
        for t in inst.timers:
            t.cancel()
        inst.timers.clear()
        # close only our ends, silently: frames already in flight still land,
        # and peers discover the death through timeouts, not notifications
        for ch in inst.channels:
            ch.open = False
        inst.channels.clear()

    # -- reclamation -------------------------------------------------------

    def instance(self, instance_id: str) -> Instance | None:
        return self._instances.get(instance_id)

    def live_instance(self, function_id: str, replica_index: int) -> Instance | None:
        fn = self._functions.get(function_id)
        return fn.replicas.get(replica_index) if fn else None

    def warm_idle(self) -> list[Instance]:
        out = [i for f in self._functions.values() for i in f.replicas.values()
               if i.state is InstanceState.WARM_IDLE]
        out.sort(key=lambda i: i.instance_id)
        return out

    def destroy(self, instance_id: str) -> bool:
        inst = self._instances.get(instance_id)
        if inst is None or inst.state is InstanceState.DESTROYED:
            return False
        self._destroy(inst)
        return True

    def _destroy(self, inst: Instance):
        inst.state = InstanceState.DESTROYED
        self._quiesce(inst)
        inst.runtime = None
        inst.memory_used = 0
        fn = self._functions[inst.function_id]
        if fn.replicas.get(inst.replica_index) is inst:
            del fn.replicas[inst.replica_index]

    def reclaim_tick(self) -> list[str]:
        """Minute-boundary reclamation draw. Running instances are exempt;
        stored state of the victims vanishes."""
        if self._sampler is None:
            return []
        r = self._sampler.sample(self.rng)
        idle = self.warm_idle()
        victims = self.rng.sample(idle, min(r, len(idle))) if idle else []
        for inst in victims:
            self._destroy(inst)
        ids = sorted(i.instance_id for i in victims)
        self.reclaim_log.append((self.loop.now, tuple(ids)))
        return ids


# --------------------------------------------------------------------------
# facade
# --------------------------------------------------------------------------


class Simulation:
    """Wires loop, network, provider, meter and the minute reclaim ticker
    from a SystemConfig."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.loop = EventLoop()
        self.rng = random.Random(cfg.seed)
        self.network = Network(self.loop, latency_ms=cfg.net_latency_ms,
                               wire_check=cfg.wire_check)
        self.meter = BillingMeter()
        self.provider = Provider(
            self.loop, self.network, self.meter, self.rng,
            capacity_fraction=cfg.capacity_fraction,
            warm_latency_ms=cfg.warm_latency_ms,
            cold_latency_ms=cfg.cold_latency_ms)
        pmf = cfg.reclaim.pmf(cfg.pool_size)
        self.provider.set_reclaim_pmf(pmf)
        if pmf is not None:
            self.loop.call_at(60_000, self._reclaim_tick)

    def _reclaim_tick(self):
        self.provider.reclaim_tick()
        self.loop.call_later(60_000, self._reclaim_tick)

    @property
    def now(self) -> int:
        return self.loop.now

    def run_until(self, t: int):
        self.loop.run_until(t)

    def run_until_idle(self, max_events=1_000_000):
        self.loop.run_until_idle(max_events)

    def run_until_complete(self, fut: SimFuture, timeout_ms=600_000):
        deadline = self.loop.now + timeout_ms
        while not fut.done:
            nxt = self.loop.peek()
            if nxt is None:
                raise SimError("event loop idle but future unresolved")
            if nxt > deadline:
                raise SimTimeout(f"future unresolved after {timeout_ms} ms")
            self.loop.step()
        return fut.result()

    def run_realtime(self, until_ms: int, speed: float = 1.0):
        """Pace the identical event sequence against the wall clock."""
        wall0 = _time.monotonic()
        virt0 = self.loop.now
        while True:
            nxt = self.loop.peek()
            if nxt is None or nxt > until_ms:
                break
            lag = (nxt - virt0) / 1000.0 / speed - (_time.monotonic() - wall0)
            if lag > 0:
                _time.sleep(lag)
            self.loop.step()
        self.loop.now = max(self.loop.now, int(until_ms))
