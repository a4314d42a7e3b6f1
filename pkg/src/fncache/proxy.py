"""Pool manager and streaming rendezvous.

Owns the chunk-to-node mapping, enforces pool capacity with CLOCK object
eviction, fans chunk requests out to nodes and joins the first d replies,
drives the per-connection preflight FSM, schedules warm-ups, and brokers
backup epochs through an in-process relay.
"""

from __future__ import annotations

import itertools
from collections import Counter, deque
from dataclasses import dataclass, field

from .config import SystemConfig
from .ec import ChunkId, ECConfig
from .sim import Channel, SimFuture, Simulation
from .wire import (
    Ack,
    AckStatus,
    BackupCmd,
    Bye,
    ConnEvent,
    ConnState,
    CONN_INIT,
    Data,
    Del,
    FsmAction,
    Get,
    InitBackup,
    Liveness,
    Ping,
    Pong,
    Set,
    Validity,
    frame_len,
    proxy_fsm_step,
)

RELAY_IDLE_MS = 30_000


class ProxyError(Exception):
    pass


class CacheMiss(ProxyError):
    """Key not present in the mapping."""


class ObjectLost(ProxyError):
    """More than p chunks unavailable; carries per-chunk diagnostics."""

    def __init__(self, key: str, diagnostics: dict):
        super().__init__(f"object {key!r} lost: {diagnostics}")
        self.key = key
        self.diagnostics = diagnostics


class CapacityError(ProxyError):
    pass


class PutError(ProxyError):
    pass


@dataclass
class PendingSend:
    msg: object
    on_reply: object = None   # callable(msg) when the node answers
    on_fail: object = None    # callable(reason) when retries run out
    retries_left: int = 1
    timer: object = None


@dataclass
class ObjectMeta:
    key: str
    ec: ECConfig
    original_len: int
    chunk_size: int
    placements: dict  # seq -> node_id
    version: int
    bit: bool = True
    inserted_at: int = 0
    last_access: int = 0


@dataclass
class GetResult:
    key: str
    parts: dict          # seq -> payload, exactly d entries
    ec: ECConfig
    original_len: int
    version: int
    failed: dict = field(default_factory=dict)  # seq -> reason, best effort


class NodeSlot:
    __slots__ = ("node_id", "conn", "state", "queue", "inflight",
                 "accounted_bytes", "last_activity", "epoch", "relay",
                 "ping_timer")

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.conn: Channel | None = None
        self.state: ConnState = CONN_INIT
        self.queue: deque[PendingSend] = deque()
        self.inflight: dict[int, PendingSend] = {}
        self.accounted_bytes = 0
        self.last_activity = 0
        self.epoch = 0
        self.relay: Relay | None = None
        self.ping_timer = None


class Relay:
    """Two-leg verbatim frame forwarder for one backup epoch. The first
    dial-in is the source, the second the destination; a BYE crossing from
    the destination ends the epoch."""

    def __init__(self, proxy: "Proxy", addr: str):
        self.proxy = proxy
        self.addr = addr
        self.legs: list[Channel] = []
        self._stash: dict[int, list] = {0: [], 1: []}
        self.bytes_forwarded = 0
        self.done = False
        self._torn = False
        self._last_frame = proxy.loop.now
        proxy.net.listen(addr, self._accept)
        self._idle_timer = proxy.loop.call_later(RELAY_IDLE_MS, self._idle_check)

    def _accept(self, ch: Channel) -> None:
        if self._torn or len(self.legs) >= 2:
            ch.close(notify=False)
            return
        idx = len(self.legs)
        self.legs.append(ch)
        ch.on_message = lambda _ch, msg, i=idx: self._forward(i, msg)
        for msg in self._stash[idx]:
            ch.send(msg)
        self._stash[idx].clear()

    def _forward(self, i: int, msg) -> None:
        if self._torn:
            return
        self._last_frame = self.proxy.loop.now
        self.bytes_forwarded += frame_len(msg)
        other = i ^ 1
        if other < len(self.legs):
            self.legs[other].send(msg)
        else:
            self._stash[other].append(msg)
        if isinstance(msg, Bye) and i == 1:
            # destination reports the sync complete
            self.done = True
            self.teardown()

    def _idle_check(self) -> None:
        self._idle_timer = None
        if self._torn:
            return
        idle = self.proxy.loop.now - self._last_frame
        if idle >= RELAY_IDLE_MS:
            self.teardown()
        else:
            self._idle_timer = self.proxy.loop.call_later(
                RELAY_IDLE_MS - idle, self._idle_check)

    def teardown(self) -> None:
        if self._torn:
            return
        self._torn = True
        self.done = True
        if self._idle_timer is not None:
            self._idle_timer.cancel()
            self._idle_timer = None
        self.proxy.net.unlisten(self.addr)
        for ch in self.legs:
            ch.close(notify=False)
        self.proxy.relay_bytes_total += self.bytes_forwarded


class Proxy:
    """One pool's manager. Client calls are in-process and return futures
    resolved on the simulation loop; node traffic is wire frames."""

    def __init__(self, sim: Simulation, cfg: SystemConfig, node_ids,
                 addr: str = "proxy0"):
        self.sim = sim
        self.cfg = cfg
        self.addr = addr
        self.loop = sim.loop
        self.net = sim.network
        self.provider = sim.provider
        self.slots: dict[str, NodeSlot] = {n: NodeSlot(n) for n in node_ids}
        self.mapping: dict[str, ObjectMeta] = {}
        self._ring: list[str] = []   # object keys in insertion order
        self._hand = 0
        self._versions: dict[str, int] = {}  # per-key, survives DEL
        self._req_seq = itertools.count(1)
        self._relay_seq = itertools.count(1)
        self._rid_slot: dict[int, NodeSlot] = {}
        self.relay_bytes_total = 0
        self.counters: Counter = Counter()
        self._warmup_timer = None
        # callback(key): a missing-chunk report arrived after its read was
        # served, so the object is mapped but short on redundancy
        self.on_degraded = None
        self.net.listen(addr, self._accept)

    # ------------------------------------------------------------------
    # client-facing surface (in-process)
    # ------------------------------------------------------------------

    @property
    def pool_node_ids(self) -> list[str]:
        return sorted(self.slots)

    def contains(self, key: str) -> bool:
        return key in self.mapping

    def route_put(self, key: str, ec: ECConfig, placements, chunks,
                  original_len: int | None = None) -> SimFuture:
        """Store one erasure-coded object. Resolves True when every chunk
        is acknowledged; on any failure rolls back accounting and mapping
        and deletes already-stored chunks best-effort."""
        fut = SimFuture()
        placements = list(placements)
        if len(chunks) != ec.n or len(placements) != ec.n:
            fut.set_error(PutError(f"need {ec.n} placements and chunks"))
            return fut
        if len(set(placements)) != len(placements):
            fut.set_error(PutError("placements must be distinct"))
            return fut
        unknown = [n for n in placements if n not in self.slots]
        if unknown:
            fut.set_error(PutError(f"unknown nodes: {unknown}"))
            return fut

        if key in self.mapping:
            # the client normally invalidates first; stay safe if not
            self._remove_object(key, send_dels=True)
        chunk_size = chunks[0].chunk_size
        if original_len is None:
            original_len = chunk_size * ec.d
        cap = self.cfg.node_capacity_bytes
        if chunk_size > cap:
            fut.set_error(CapacityError(
                f"chunk of {chunk_size} bytes exceeds node capacity {cap}"))
            return fut
        try:
            for nid in placements:
                if self.slots[nid].accounted_bytes + chunk_size > cap:
                    self._evict_clock(chunk_size, nid)
        except CapacityError as exc:
            fut.set_error(exc)
            return fut
        for nid in placements:
            self.slots[nid].accounted_bytes += chunk_size

        version = self._versions.get(key, 0) + 1
        self._versions[key] = version
        op = {"pending": len(chunks), "done": False, "acked": set()}

        def fail(reason: str):
            if op["done"]:
                return
            op["done"] = True
            for nid in placements:
                self.slots[nid].accounted_bytes -= chunk_size
            if self._versions.get(key) == version:
                # best-effort cleanup of stored chunks; skipped when a newer
                # write is in flight, whose chunks a Del would also destroy
                for nid in op["acked"]:
                    self._submit(self.slots[nid],
                                 PendingSend(Del(next(self._req_seq), key)))
            self.counters["put_failures"] += 1
            fut.set_error(PutError(f"put {key!r} failed: {reason}"))

        def make_on_reply(nid):
            def on_reply(msg):
                if op["done"]:
                    return
                if msg.status is not AckStatus.OK:
                    fail(f"{nid} answered {msg.status.name}")
                    return
                op["acked"].add(nid)
                op["pending"] -= 1
                if op["pending"] == 0:
                    op["done"] = True
                    if self._versions.get(key) != version:
                        # a newer write for this key was issued while these
                        # chunks were in flight; drop the stale commit and
                        # leave its orphans to the node version guard
                        for pnid in placements:
                            self.slots[pnid].accounted_bytes -= chunk_size
                        self.counters["superseded_puts"] += 1
                        fut.set_result(False)
                        return
                    self._commit_put(key, ec, placements, chunks, version,
                                     original_len)
                    fut.set_result(True)
            return on_reply

        for chunk, nid in zip(chunks, placements):
            rid = next(self._req_seq)
            ps = PendingSend(Set(rid, str(chunk.id), version, chunk.data),
                             on_reply=make_on_reply(nid),
                             on_fail=fail,
                             retries_left=self.cfg.invoke_retries)
            self._submit(self.slots[nid], ps)
        return fut

    def _commit_put(self, key, ec, placements, chunks, version,
                    original_len: int) -> None:
        # submit-time overwrite removal plus the version guard make a live
        # mapping here impossible
        assert key not in self.mapping, f"double commit for {key!r}"
        meta = ObjectMeta(
            key=key, ec=ec,
            original_len=original_len,
            chunk_size=chunks[0].chunk_size,
            placements={c.id.seq: nid for c, nid in zip(chunks, placements)},
            version=version,
            inserted_at=self.loop.now, last_access=self.loop.now)
        self.mapping[key] = meta
        self._ring.append(key)
        self.counters["puts"] += 1

    def route_get(self, key: str) -> SimFuture:
        """First-d streaming read. Resolves to a GetResult with exactly d
        chunk payloads; stragglers past the d-th are read and discarded."""
        fut = SimFuture()
        meta = self.mapping.get(key)
        if meta is None:
            self.counters["misses"] += 1
            fut.set_error(CacheMiss(key))
            return fut
        meta.bit = True
        meta.last_access = self.loop.now
        d, p = meta.ec.d, meta.ec.p
        op = {"parts": {}, "failed": {}, "done": False, "served": False}

        def settle():
            if op["done"]:
                return
            if len(op["parts"]) >= d:
                op["done"] = True
                op["served"] = True
                self.counters["gets_served"] += 1
                fut.set_result(GetResult(
                    key=key, parts=dict(op["parts"]), ec=meta.ec,
                    original_len=meta.original_len, version=meta.version,
                    failed=dict(op["failed"])))
            elif len(op["failed"]) > p:
                op["done"] = True
                self.counters["objects_lost"] += 1
                fut.set_error(ObjectLost(key, dict(op["failed"])))

        def make_handlers(seq, nid):
            def on_reply(msg):
                if msg.found:
                    if not op["done"]:
                        op["parts"][seq] = msg.payload
                    settle()
                    return
                op["failed"][seq] = f"{nid}: chunk missing"
                settle()
                if (op["served"] and self.on_degraded is not None
                        and self.mapping.get(key) is meta):
                    # straggler proved a chunk gone after the read was
                    # already served; without this report the deficit
                    # would silently persist
                    self.counters["late_degraded"] += 1
                    self.on_degraded(key)

            def on_fail(reason):
                op["failed"][seq] = f"{nid}: {reason}"
                settle()
            return on_reply, on_fail

        for seq, nid in sorted(meta.placements.items()):
            rid = next(self._req_seq)
            on_reply, on_fail = make_handlers(seq, nid)
            ps = PendingSend(Get(rid, str(ChunkId(key, seq))),
                             on_reply=on_reply, on_fail=on_fail,
                             retries_left=self.cfg.invoke_retries)
            self._submit(self.slots[nid], ps)
        return fut

    def submit_del(self, key: str) -> SimFuture:
        """Drop the mapping and accounting now; chunk deletion on the nodes
        follows through the normal dispatch path (waking them if needed)."""
        fut = SimFuture()
        existed = key in self.mapping
        if existed:
            self._remove_object(key, send_dels=True)
            self.counters["dels"] += 1
        fut.set_result(existed)
        return fut

    # ------------------------------------------------------------------
    # capacity and eviction
    # ------------------------------------------------------------------

    def _evict_clock(self, needed_bytes: int, target_node: str) -> list[str]:
        """CLOCK second-chance sweep over objects in insertion order,
        considering only objects with a chunk on the constrained node."""
        slot = self.slots[target_node]
        cap = self.cfg.node_capacity_bytes
        evicted: list[str] = []
        spins = 0
        while slot.accounted_bytes + needed_bytes > cap:
            if not self._ring or spins >= 2 * len(self._ring):
                raise CapacityError(
                    f"cannot free {needed_bytes} bytes on {target_node}")
            if self._hand >= len(self._ring):
                self._hand = 0
            key = self._ring[self._hand]
            meta = self.mapping[key]
            if target_node not in meta.placements.values():
                self._hand += 1
                spins += 1
                continue
            if meta.bit:
                meta.bit = False
                self._hand += 1
                spins += 1
                continue
            self._remove_object(key, send_dels=True)
            evicted.append(key)
            self.counters["evictions"] += 1
            spins = 0
        return evicted

    def _remove_object(self, key: str, send_dels: bool) -> None:
        meta = self.mapping.pop(key)
        idx = self._ring.index(key)
        self._ring.pop(idx)
        if idx < self._hand:
            self._hand -= 1
        for nid in set(meta.placements.values()):
            self.slots[nid].accounted_bytes -= meta.chunk_size
        if send_dels:
            for nid in set(meta.placements.values()):
                self._submit(self.slots[nid],
                             PendingSend(Del(next(self._req_seq), key)))

    def check_consistency(self) -> None:
        """Test-build invariant: accounting matches the mapping exactly."""
        assert sorted(self._ring) == sorted(self.mapping), "ring desynced"
        per_node: Counter = Counter()
        for meta in self.mapping.values():
            assert len(meta.placements) == meta.ec.n
            for nid in meta.placements.values():
                assert nid in self.slots, f"unknown node {nid}"
                per_node[nid] += meta.chunk_size
        for nid, slot in self.slots.items():
            assert slot.accounted_bytes == per_node.get(nid, 0), (
                f"{nid}: accounted {slot.accounted_bytes} != {per_node.get(nid, 0)}")
            assert slot.accounted_bytes <= self.cfg.node_capacity_bytes

    # ------------------------------------------------------------------
    # dispatch machinery (preflight FSM)
    # ------------------------------------------------------------------

    def _step(self, slot: NodeSlot, event: ConnEvent) -> FsmAction:
        slot.state, action = proxy_fsm_step(slot.state, event)
        return action

    def _submit(self, slot: NodeSlot, ps: PendingSend) -> None:
        slot.queue.append(ps)
        self._pump(slot)

    def _pump(self, slot: NodeSlot) -> None:
        while slot.queue:
            action = self._step(slot, ConnEvent.WANT_SEND)
            if action is FsmAction.DISPATCH:
                self._dispatch(slot, slot.queue.popleft())
            elif action is FsmAction.SEND_PING:
                slot.conn.send(Ping())
                self._arm_ping_timer(slot)
                return
            elif action is FsmAction.INVOKE:
                self._invoke(slot)
                self._arm_ping_timer(slot)
                return
            else:  # QUEUE: validation in progress
                self._arm_ping_timer(slot)
                return

    def _dispatch(self, slot: NodeSlot, ps: PendingSend) -> None:
        rid = ps.msg.req_id
        slot.conn.send(ps.msg)
        slot.inflight[rid] = ps
        self._rid_slot[rid] = slot
        ps.timer = self.loop.call_later(
            self.cfg.request_timeout_ms, self._on_request_timeout, slot, rid)
        self._step(slot, ConnEvent.SENT_CHUNK_REQ)

    def _invoke(self, slot: NodeSlot, purpose: str = "serve") -> None:
        self.provider.invoke(slot.node_id,
                             {"proxy_addr": self.addr, "ping": True},
                             purpose=purpose)
        slot.last_activity = self.loop.now
        self.counters[f"invokes_{purpose}"] += 1

    def _arm_ping_timer(self, slot: NodeSlot) -> None:
        if slot.ping_timer is None:
            slot.ping_timer = self.loop.call_later(
                self.cfg.request_timeout_ms, self._on_validation_timeout, slot)

    def _cancel_ping_timer(self, slot: NodeSlot) -> None:
        if slot.ping_timer is not None:
            slot.ping_timer.cancel()
            slot.ping_timer = None

    def _on_validation_timeout(self, slot: NodeSlot) -> None:
        slot.ping_timer = None
        if slot.state.validity is not Validity.VALIDATING:
            return
        # the head request paid for this attempt
        if slot.queue:
            head = slot.queue[0]
            head.retries_left -= 1
            if head.retries_left < 0:
                slot.queue.popleft()
                if head.on_fail is not None:
                    head.on_fail("node unreachable")
        self._declare_dead(slot)

    def _on_request_timeout(self, slot: NodeSlot, rid: int) -> None:
        ps = slot.inflight.pop(rid, None)
        self._rid_slot.pop(rid, None)
        if ps is None:
            return
        ps.retries_left -= 1
        if ps.retries_left < 0:
            if ps.on_fail is not None:
                ps.on_fail("request timed out")
        else:
            slot.queue.appendleft(ps)
        self._declare_dead(slot)

    def _declare_dead(self, slot: NodeSlot) -> None:
        """The node stopped answering: requeue in-flight work and re-invoke
        through the TIMEOUT row."""
        self._requeue_inflight(slot)
        was_maybe = slot.state.liveness is Liveness.MAYBE
        self._step(slot, ConnEvent.TIMEOUT)   # -> (sleeping, validating)
        if was_maybe:
            self._end_epoch(slot)
        self._cancel_ping_timer(slot)
        if slot.conn is not None:
            slot.conn.close(notify=False)
            slot.conn = None
        if slot.queue or slot.inflight:
            self._invoke(slot)
            self._arm_ping_timer(slot)
        # else: parked in (sleeping, validating); the next submit re-arms

    def _requeue_inflight(self, slot: NodeSlot) -> None:
        items = list(slot.inflight.values())
        for ps in items:
            if ps.timer is not None:
                ps.timer.cancel()
                ps.timer = None
        for rid in list(slot.inflight):
            self._rid_slot.pop(rid, None)
        slot.inflight.clear()
        for ps in reversed(items):
            slot.queue.appendleft(ps)

    # ------------------------------------------------------------------
    # node frames
    # ------------------------------------------------------------------

    def _accept(self, ch: Channel) -> None:
        ch.on_message = self._on_node_frame

    def _on_node_frame(self, ch: Channel, msg) -> None:
        if isinstance(msg, Pong):
            self._on_pong(ch, msg)
        elif isinstance(msg, Bye):
            self._on_bye(ch, msg)
        elif isinstance(msg, InitBackup):
            self._on_init_backup(ch, msg)
        elif isinstance(msg, (Data, Ack)):
            self._on_reply(ch, msg)
        # anything else from a node is a protocol surprise; drop it

    def _slot_for(self, node_id: str) -> NodeSlot | None:
        return self.slots.get(node_id)

    def _on_pong(self, ch: Channel, msg: Pong) -> None:
        slot = self._slot_for(msg.node_id)
        if slot is None:
            return
        slot.last_activity = self.loop.now
        if slot.conn is not ch:
            # a different instance answers for this node now; rebind and
            # force revalidation on the fresh channel
            old = slot.conn
            slot.conn = ch
            slot.state = ConnState(slot.state.liveness, Validity.UNVALIDATED)
            if old is not None:
                old.close(notify=False)  # drop the superseded leg
        self._cancel_ping_timer(slot)
        action = self._step(slot, ConnEvent.GOT_PONG)
        if action is FsmAction.FLUSH and slot.queue:
            self._dispatch(slot, slot.queue.popleft())
        self._pump(slot)

    def _on_bye(self, ch: Channel, msg: Bye) -> None:
        slot = self._slot_for(msg.node_id)
        if slot is None:
            return
        slot.last_activity = self.loop.now
        if ch is not slot.conn:
            return  # goodbye from a previous life; nothing to do
        if slot.state.liveness is Liveness.MAYBE:
            # the serving node of an epoch retired: epoch over, node gone
            self._end_epoch(slot)
            self._step(slot, ConnEvent.BACKUP_ENDED)
        else:
            self._step(slot, ConnEvent.GOT_BYE)  # REQUEUE rows
        self._requeue_inflight(slot)
        self._cancel_ping_timer(slot)
        slot.conn.close(notify=False)
        slot.conn = None
        self._pump(slot)

    def _on_reply(self, ch: Channel, msg) -> None:
        rid = msg.req_id
        slot = self._rid_slot.pop(rid, None)
        if slot is None:
            return  # straggler after timeout/requeue: read and discard
        slot.last_activity = self.loop.now
        ps = slot.inflight.pop(rid, None)
        if ps is None:
            return
        if ps.timer is not None:
            ps.timer.cancel()
            ps.timer = None
        if ps.on_reply is not None:
            ps.on_reply(msg)

    # ------------------------------------------------------------------
    # backup coordination
    # ------------------------------------------------------------------

    def _on_init_backup(self, ch: Channel, msg: InitBackup) -> None:
        slot = self._slot_for(msg.node_id)
        if slot is None or ch is not slot.conn:
            return
        slot.last_activity = self.loop.now
        if slot.state.liveness is Liveness.MAYBE:
            if slot.relay is not None and not slot.relay.done:
                return  # an epoch is already in flight
            # previous epoch concluded while the node kept serving: cycle
            # the slot through the table before starting the next one
            self._end_epoch(slot)
            self._step(slot, ConnEvent.BACKUP_ENDED)
        slot.epoch += 1
        relay = Relay(self, f"{self.addr}/relay/{next(self._relay_seq)}")
        slot.relay = relay
        self._step(slot, ConnEvent.BACKUP_STARTED)
        self.counters["backup_epochs"] += 1
        ch.send(BackupCmd(relay.addr, slot.epoch))

    def _end_epoch(self, slot: NodeSlot) -> None:
        if slot.relay is not None:
            slot.relay.teardown()
            slot.relay = None

    # ------------------------------------------------------------------
    # warm-up scheduling
    # ------------------------------------------------------------------

    def start_warmup_scheduler(self, period_ms: int = 1000,
                               offset_ms: int = 500) -> None:
        if self._warmup_timer is not None:
            return
        self._warmup_timer = self.loop.call_later(
            offset_ms, self._warmup_tick, period_ms)

    def stop_warmup_scheduler(self) -> None:
        if self._warmup_timer is not None:
            self._warmup_timer.cancel()
            self._warmup_timer = None

    def _warmup_tick(self, period_ms: int) -> None:
        t_warm_ms = int(self.cfg.t_warm_s * 1000)
        now = self.loop.now
        for slot in self.slots.values():
            if (slot.state.liveness is Liveness.SLEEPING
                    and slot.state.validity is Validity.UNVALIDATED
                    and not slot.queue and not slot.inflight
                    and now - slot.last_activity >= t_warm_ms):
                self._step(slot, ConnEvent.INVOKED)
                self._invoke(slot, purpose="warmup")
        self._warmup_timer = self.loop.call_later(
            period_ms, self._warmup_tick, period_ms)
