"""In-function cache runtime.

The guest program executed inside each simulated instance: a chunk store
with CLOCK touch bits, a duration controller that returns the instance a few
milliseconds before a billing-cycle boundary, preflight (PING/PONG) replies,
and both halves of the two-replica delta backup protocol.
"""

from __future__ import annotations

from collections import deque

from .ec import ChunkId
from .sim import ConnectError, InstanceContext
from .wire import (
    Ack,
    AckStatus,
    BackupCmd,
    BackupRole,
    Bye,
    Data,
    Del,
    Get,
    Hello,
    InitBackup,
    MetaKeys,
    MigData,
    MigGet,
    NodeEvent,
    NodeState,
    Ping,
    Pong,
    Set,
    node_fsm_step,
)

BILLING_CYCLE_MS = 100
# a PING announces an imminent request; hold the instance briefly for it
PING_GRACE_MS = 50
# relay silence after which a backup participant declares the peer lost
BACKUP_STALL_MS = 5_000


class StoreEntry:
    __slots__ = ("payload", "version", "bit", "touch")

    def __init__(self, payload: bytes, version: int):
        self.payload = payload
        self.version = version
        self.bit = False
        self.touch = 0


class ChunkStore:
    """Chunk payloads with version guards.

    CLOCK bits mark chunks touched since the last backup sweep; together with
    a monotone touch counter they induce the MRU-first streaming order.
    """

    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = capacity_bytes
        self.entries: dict[str, StoreEntry] = {}
        self.total_bytes = 0
        self._touch_seq = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self.entries

    def _touch(self, entry: StoreEntry) -> None:
        self._touch_seq += 1
        entry.touch = self._touch_seq
        entry.bit = True

    def get(self, chunk_id: str) -> StoreEntry | None:
        """Read for serving: hits refresh recency."""
        entry = self.entries.get(chunk_id)
        if entry is not None:
            self._touch(entry)
        return entry

    def peek(self, chunk_id: str) -> StoreEntry | None:
        """Read without touching (migration pulls must not perturb recency)."""
        return self.entries.get(chunk_id)

    def put(self, chunk_id: str, version: int, payload: bytes) -> AckStatus:
        old = self.entries.get(chunk_id)
        if old is not None and version <= old.version:
            return AckStatus.STALE
        delta = len(payload) - (len(old.payload) if old is not None else 0)
        if self.total_bytes + delta > self.capacity_bytes:
            return AckStatus.OVERFLOW
        if old is None:
            old = self.entries[chunk_id] = StoreEntry(payload, version)
        else:
            old.payload = payload
            old.version = version
        self.total_bytes += delta
        self._touch(old)
        return AckStatus.OK

    def discard(self, chunk_id: str) -> None:
        entry = self.entries.pop(chunk_id, None)
        if entry is not None:
            self.total_bytes -= len(entry.payload)

    def delete_object(self, object_key: str) -> int:
        doomed = [cid for cid in self.entries
                  if ChunkId.parse(cid).object_key == object_key]
        for cid in doomed:
            self.discard(cid)
        return len(doomed)

    def backup_order(self) -> list[tuple[str, int]]:
        """(chunk_id, version) pairs MRU -> LRU; the sweep consumes the bits,
        so the next epoch's bits mean "touched since this sweep"."""
        ranked = sorted(self.entries.items(),
                        key=lambda kv: (kv[1].bit, kv[1].touch), reverse=True)
        for entry in self.entries.values():
            entry.bit = False
        return [(cid, e.version) for cid, e in ranked]


class DurationController:
    """Anticipatory billed-duration control.

    Fires buffer_ms before every whole-cycle boundary and either extends by
    one more cycle or tells the node to return. Every deadline advance is an
    Extend decision, so billed duration is exactly 100 * (1 + extends).
    """

    def __init__(self, ctx: InstanceContext, buffer_ms: int, on_return):
        if not 2 <= buffer_ms <= 10:
            raise ValueError("buffer_ms must be in 2..10")
        self.ctx = ctx
        self.buffer_ms = buffer_ms
        self.on_return = on_return
        self.started_at = ctx.now
        self.cycles = 1
        self.extends = 0
        self.requests_this_cycle = 0
        self.inflight = 0
        self.pins = 0
        self.grace_until = -1
        self.decisions: list[str] = []
        self._timer = ctx.call_later(self.deadline - ctx.now, self._fire)

    @property
    def deadline(self) -> int:
        return self.started_at + self.cycles * BILLING_CYCLE_MS - self.buffer_ms

    def request_started(self) -> None:
        self.requests_this_cycle += 1
        self.inflight += 1

    def request_done(self) -> None:
        self.inflight -= 1

    def ping_grace(self) -> None:
        self.grace_until = max(self.grace_until, self.ctx.now + PING_GRACE_MS)

    def pin(self) -> None:
        self.pins += 1

    def unpin(self) -> None:
        self.pins -= 1

    def _fire(self) -> None:
        busy = (self.inflight > 0 or self.pins > 0
                or self.ctx.now < self.grace_until)
        if self.requests_this_cycle >= 2 or busy:
            self.decisions.append("extend")
            self.extends += 1
            self.cycles += 1
            self.requests_this_cycle = 0
            self._timer = self.ctx.call_later(
                self.deadline - self.ctx.now, self._fire)
        else:
            self.decisions.append("return")
            self.on_return()


class NodeRuntime:
    """One cache node's guest program; persists across warm invocations."""

    def __init__(self, ctx: InstanceContext, *, buffer_ms: int = 5,
                 t_bak_ms: int = 300_000, backup_enabled: bool = True,
                 service_delay_fn=None):
        self.ctx = ctx
        self.buffer_ms = buffer_ms
        self.t_bak_ms = t_bak_ms
        self.backup_enabled = backup_enabled
        self.service_delay_fn = service_delay_fn
        self.store = ChunkStore(ctx.capacity_bytes)
        self.last_backup_at: int | None = None
        # per-invocation state
        self.state = NodeState.NOT_RUNNING
        self.proxy_chan = None
        self.proxy_addr = ""
        self.ctl: DurationController | None = None
        self.backup = None
        self._busy = False
        self._pending: deque = deque()

    # -- lifecycle -----------------------------------------------------------

    def on_invoke(self, params: dict) -> None:
        self.state = node_fsm_step(NodeState.NOT_RUNNING, NodeEvent.INVOKED)
        self.backup = None
        self._busy = False
        self._pending.clear()
        self.proxy_addr = params.get("proxy_addr", "")
        self.ctl = DurationController(self.ctx, self.buffer_ms, self._retire)
        if params.get("backup_role") == "destination":
            DestinationSession(self, params)
            return
        try:
            self.proxy_chan = self.ctx.dial(self.proxy_addr, label="node")
        except ConnectError:
            self._retire(send_bye=False)
            return
        self.proxy_chan.on_message = self._on_proxy_msg
        if params.get("ping"):
            self.proxy_chan.send(Pong(self.ctx.node_id))
            self.ctl.ping_grace()
        self._maybe_start_backup()

    def _retire(self, send_bye: bool = True) -> None:
        self.state = node_fsm_step(self.state, NodeEvent.TIMER_EXPIRED)
        if send_bye and self.proxy_chan is not None:
            self.proxy_chan.send(Bye(self.ctx.node_id))
        self.proxy_chan = None
        self.ctx.finish()

    def _maybe_start_backup(self) -> None:
        if not self.backup_enabled:
            return
        now = self.ctx.now
        if self.last_backup_at is None:
            # fresh runtime: nothing to back up yet, just start the clock
            self.last_backup_at = now
            return
        if now - self.last_backup_at < self.t_bak_ms or not self.store:
            return
        self.proxy_chan.send(InitBackup(self.ctx.node_id))

    # -- request stream ------------------------------------------------------

    def _on_proxy_msg(self, ch, msg) -> None:
        if isinstance(msg, Ping):
            ch.send(Pong(self.ctx.node_id))
            self.ctl.ping_grace()
            return
        if isinstance(msg, BackupCmd):
            if self.backup is None:
                SourceSession(self, msg.relay_addr, msg.epoch)
            return
        # chunk requests: strictly serial, arrival order
        self.state = node_fsm_step(self.state, NodeEvent.REQUEST_ARRIVED)
        self.ctl.request_started()
        self._pending.append(msg)
        self._drain()

    def _drain(self) -> None:
        while not self._busy and self._pending:
            msg = self._pending.popleft()
            if isinstance(msg, Get) and self.service_delay_fn is not None:
                delay = int(self.service_delay_fn(self.ctx.node_id, msg))
                if delay > 0:
                    self._busy = True
                    self.ctx.call_later(delay, self._complete_delayed, msg)
                    return
            self._serve(msg)

    def _complete_delayed(self, msg) -> None:
        self._busy = False
        self._serve(msg)
        self._drain()

    def _serve(self, msg) -> None:
        bk = self.backup
        if isinstance(bk, DestinationSession) and bk.active and bk.intercept(msg):
            return  # session answers (and accounts) later
        if isinstance(msg, Get):
            entry = self.store.get(msg.chunk_id)
            found = entry is not None
            self.proxy_chan.send(Data(msg.req_id, msg.chunk_id, found,
                                      entry.payload if found else b""))
        elif isinstance(msg, Set):
            status = self.store.put(msg.chunk_id, msg.version, msg.payload)
            self.ctx.set_memory_used(self.store.total_bytes)
            self.proxy_chan.send(Ack(msg.req_id, status))
        elif isinstance(msg, Del):
            self.store.delete_object(msg.object_key)
            self.ctx.set_memory_used(self.store.total_bytes)
            self.proxy_chan.send(Ack(msg.req_id, AckStatus.OK))
        self.request_done()

    def request_done(self) -> None:
        self.ctl.request_done()
        if self.ctl.inflight == 0:
            self.state = node_fsm_step(self.state, NodeEvent.REQUEST_DONE)

    # -- backup session plumbing ---------------------------------------------

    def backup_started(self) -> None:
        self.state = node_fsm_step(self.state, NodeEvent.BACKUP_STARTED)
        self.ctl.pin()

    def backup_ended(self) -> None:
        self.state = node_fsm_step(self.state, NodeEvent.BACKUP_ENDED)
        self.ctl.unpin()
        self.last_backup_at = self.ctx.now
        self.backup = None


class _RelaySession:
    """Shared watchdog plumbing for the two backup roles."""

    def __init__(self, node: NodeRuntime):
        self.node = node
        self.active = False
        self.relay = None
        self._last_traffic = node.ctx.now
        self._watchdog = None

    def _arm_watchdog(self) -> None:
        self._last_traffic = self.node.ctx.now
        if self._watchdog is None:
            self._watchdog = self.node.ctx.call_later(
                BACKUP_STALL_MS, self._watchdog_fire)

    def _watchdog_fire(self) -> None:
        self._watchdog = None
        if not self.active:
            return
        idle = self.node.ctx.now - self._last_traffic
        if idle < BACKUP_STALL_MS:
            self._watchdog = self.node.ctx.call_later(
                BACKUP_STALL_MS - idle, self._watchdog_fire)
            return
        self.on_stall()

    def _teardown(self) -> None:
        self.active = False
        if self._watchdog is not None:
            self._watchdog.cancel()
            self._watchdog = None
        if self.relay is not None:
            self.relay.close(notify=False)
            self.relay = None
        self.node.backup_ended()

    def on_stall(self) -> None:  # pragma: no cover - overridden
        raise NotImplementedError


class SourceSession(_RelaySession):
    """Source half of a backup epoch: wakes the peer replica, streams the
    key manifest MRU-first, then serves pull requests over the relay."""

    def __init__(self, node: NodeRuntime, relay_addr: str, epoch: int):
        super().__init__(node)
        self.epoch = epoch
        try:
            self.relay = node.ctx.dial(relay_addr, label="bak-src")
        except ConnectError:
            return  # abort: resume normal serving, a later epoch retries
        self.relay.on_message = self._on_relay
        node.backup = self
        node.backup_started()
        self.active = True
        self._arm_watchdog()
        peer = (node.ctx.replica_index + 1) % 2
        dest_id = node.ctx.invoke(
            node.ctx.node_id,
            {"backup_role": "destination", "relay_addr": relay_addr,
             "proxy_addr": node.proxy_addr, "epoch": epoch},
            replica_index=peer, purpose="backup")
        if f".{peer}#" not in dest_id:
            # the peer slot was occupied by a running instance and the
            # provider scaled out instead; do not sync to a stranger
            self._teardown()

    def _on_relay(self, ch, msg) -> None:
        if not self.active:
            return
        self._arm_watchdog()
        node = self.node
        if isinstance(msg, Hello) and msg.role is BackupRole.DESTINATION:
            ch.send(MetaKeys(tuple(node.store.backup_order())))
        elif isinstance(msg, MigGet):
            entry = node.store.peek(msg.chunk_id)
            if entry is None:
                ch.send(MigData(msg.chunk_id, 0, b""))
            else:
                ch.send(MigData(msg.chunk_id, entry.version, entry.payload))
        elif isinstance(msg, Set):
            # write forwarded by the destination during migration
            status = node.store.put(msg.chunk_id, msg.version, msg.payload)
            node.ctx.set_memory_used(node.store.total_bytes)
            ch.send(Ack(msg.req_id, status))
        elif isinstance(msg, Del):
            node.store.delete_object(msg.object_key)
            node.ctx.set_memory_used(node.store.total_bytes)
            ch.send(Ack(msg.req_id, AckStatus.OK))
        elif isinstance(msg, Bye):
            # destination finished syncing: the epoch is complete
            self._teardown()

    def on_stall(self) -> None:
        self._teardown()


class DestinationSession(_RelaySession):
    """Destination half: pulls the delta MRU-first while serving proxy
    traffic, forwarding writes and not-yet-migrated reads to the source."""

    def __init__(self, node: NodeRuntime, params: dict):
        super().__init__(node)
        ctx = node.ctx
        try:
            self.relay = ctx.dial(params["relay_addr"], label="bak-dst")
        except ConnectError:
            self.relay = None
        node.proxy_addr = params.get("proxy_addr", "")
        try:
            node.proxy_chan = ctx.dial(node.proxy_addr, label="node")
        except ConnectError:
            if self.relay is not None:
                self.relay.close(notify=False)
            node._retire(send_bye=False)
            return
        node.proxy_chan.on_message = node._on_proxy_msg
        node.proxy_chan.send(Pong(ctx.node_id))
        if self.relay is None:
            return  # no relay: serve as a plain node from local state
        node.backup = self
        node.backup_started()
        self.active = True
        self.relay.on_message = self._on_relay
        self.relay.send(Hello(ctx.node_id, BackupRole.DESTINATION))
        self.meta: dict[str, int] | None = None
        self.pull_queue: deque[str] = deque()
        self.current: str | None = None
        self.requested: set[str] = set()
        self.parked: dict[str, list[Get]] = {}
        self.written: set[str] = set()
        self.deleted_keys: set[str] = set()
        self.source_lost = False
        self._arm_watchdog()

    # -- relay stream --------------------------------------------------------

    def _on_relay(self, ch, msg) -> None:
        if not self.active:
            return
        self._arm_watchdog()
        if isinstance(msg, MetaKeys):
            self.meta = dict(msg.entries)
            for cid, version in msg.entries:
                local = self.node.store.peek(cid)
                if local is None or local.version < version:
                    self.pull_queue.append(cid)
            self._pump()
        elif isinstance(msg, MigData):
            self.requested.discard(msg.chunk_id)
            if msg.chunk_id == self.current:
                self.current = None
            self._apply_migrated(msg)
            self._pump()
        # Acks for forwarded writes are ignored: the proxy was already
        # answered from local state

    def _apply_migrated(self, msg: MigData) -> None:
        node = self.node
        stale_delete = (msg.version == 0
                        or ChunkId.parse(msg.chunk_id).object_key in self.deleted_keys)
        if not stale_delete:
            node.store.put(msg.chunk_id, msg.version, msg.payload)
            node.ctx.set_memory_used(node.store.total_bytes)
        for req in self.parked.pop(msg.chunk_id, ()):
            entry = node.store.get(msg.chunk_id)
            node.proxy_chan.send(Data(req.req_id, msg.chunk_id,
                                      entry is not None,
                                      entry.payload if entry else b""))
            node.request_done()

    def _pump(self) -> None:
        node = self.node
        while self.current is None and self.pull_queue:
            cid = self.pull_queue.popleft()
            if cid in self.requested:
                continue
            if ChunkId.parse(cid).object_key in self.deleted_keys:
                continue
            local = node.store.peek(cid)
            if local is not None and self.meta and local.version >= self.meta.get(cid, 0):
                continue  # a racing write already superseded the pull
            self.relay.send(MigGet(cid))
            self.requested.add(cid)
            self.current = cid
        if (self.meta is not None and self.current is None
                and not self.pull_queue and not self.requested):
            self._complete()

    def _complete(self) -> None:
        node = self.node
        if not self.source_lost:
            # deletions at the source must not resurrect here
            for cid in list(node.store.entries):
                if cid not in self.meta and cid not in self.written:
                    node.store.discard(cid)
            node.ctx.set_memory_used(node.store.total_bytes)
        self.relay.send(Bye(node.ctx.node_id))
        self._teardown()

    # -- proxy traffic during migration ---------------------------------------

    def intercept(self, msg) -> bool:
        """Handle a proxy request under migration rules. Returns True when
        the session took ownership of the reply."""
        node = self.node
        if isinstance(msg, Get):
            if msg.chunk_id in node.store:
                return False  # migrated or written: serve normally
            if self.meta is not None and msg.chunk_id not in self.meta:
                return False  # source does not have it either: plain miss
            self.parked.setdefault(msg.chunk_id, []).append(msg)
            if msg.chunk_id not in self.requested:
                # jump the bulk queue for an interactive read
                self.relay.send(MigGet(msg.chunk_id))
                self.requested.add(msg.chunk_id)
            return True
        if isinstance(msg, Set):
            status = node.store.put(msg.chunk_id, msg.version, msg.payload)
            node.ctx.set_memory_used(node.store.total_bytes)
            node.proxy_chan.send(Ack(msg.req_id, status))
            if status is AckStatus.OK:
                self.written.add(msg.chunk_id)
                self.relay.send(msg)
            node.request_done()
            return True
        if isinstance(msg, Del):
            node.store.delete_object(msg.object_key)
            node.ctx.set_memory_used(node.store.total_bytes)
            self.deleted_keys.add(msg.object_key)
            for cid in [c for c in self.parked
                        if ChunkId.parse(c).object_key == msg.object_key]:
                for req in self.parked.pop(cid):
                    node.proxy_chan.send(Data(req.req_id, cid, False, b""))
                    node.request_done()
            node.proxy_chan.send(Ack(msg.req_id, AckStatus.OK))
            self.relay.send(msg)
            node.request_done()
            return True
        return False

    def on_stall(self) -> None:
        # source vanished mid-epoch: keep what we have, stop waiting
        self.source_lost = True
        node = self.node
        for cid, reqs in list(self.parked.items()):
            entry = node.store.get(cid)
            for req in reqs:
                node.proxy_chan.send(Data(req.req_id, cid, entry is not None,
                                          entry.payload if entry else b""))
                node.request_done()
        self.parked.clear()
        self._teardown()
