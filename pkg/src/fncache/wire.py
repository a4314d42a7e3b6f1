"""Binary framing and the two connection state machines.

Frame layout (all integers big-endian):

    +-------------------+-----------+------------------+
    | length (4 bytes)  | type (1B) | payload          |
    +-------------------+-----------+------------------+

length counts the type byte plus the payload. Strings are UTF-8 with a 2-byte
length prefix; req_id / version / epoch are 8 bytes; flags are 1 byte. Chunk
payload bytes run to the end of the frame.

The proxy-side connection FSM (liveness x validity) and the node lifecycle FSM
live here too, as pure transition tables shared by proxy and node runtimes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum

MAX_FRAME = 1 << 30  # sanity bound, not a protocol limit


class ProtocolError(Exception):
    """Garbage on the wire; the connection must be dropped."""


class MsgType(IntEnum):
    PING = 0x01
    PONG = 0x02
    BYE = 0x03
    GET = 0x10
    DATA = 0x11
    SET = 0x12
    ACK = 0x13
    DEL = 0x14
    INIT_BACKUP = 0x20
    BACKUP_CMD = 0x21
    HELLO = 0x22
    META_KEYS = 0x23
    MIG_GET = 0x24
    MIG_DATA = 0x25


class AckStatus(IntEnum):
    OK = 0
    STALE = 1
    OVERFLOW = 2
    ERROR = 3


class BackupRole(IntEnum):
    SOURCE = 0
    DESTINATION = 1


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Pong:
    node_id: str


@dataclass(frozen=True)
class Bye:
    node_id: str


@dataclass(frozen=True)
class Get:
    req_id: int
    chunk_id: str


@dataclass(frozen=True)
class Data:
    req_id: int
    chunk_id: str
    found: bool
    payload: bytes


@dataclass(frozen=True)
class Set:
    req_id: int
    chunk_id: str
    version: int
    payload: bytes


@dataclass(frozen=True)
class Ack:
    req_id: int
    status: AckStatus


@dataclass(frozen=True)
class Del:
    req_id: int
    object_key: str


@dataclass(frozen=True)
class InitBackup:
    node_id: str


@dataclass(frozen=True)
class BackupCmd:
    relay_addr: str
    epoch: int


@dataclass(frozen=True)
class Hello:
    node_id: str
    role: BackupRole


@dataclass(frozen=True)
class MetaKeys:
    entries: tuple  # ((chunk_id, version), ...) MRU first


@dataclass(frozen=True)
class MigGet:
    chunk_id: str


@dataclass(frozen=True)
class MigData:
    chunk_id: str
    version: int  # 0 means the source does not have the chunk
    payload: bytes


Message = (
    Ping | Pong | Bye | Get | Data | Set | Ack | Del
    | InitBackup | BackupCmd | Hello | MetaKeys | MigGet | MigData
)

_TYPE_OF = {
    Ping: MsgType.PING, Pong: MsgType.PONG, Bye: MsgType.BYE,
    Get: MsgType.GET, Data: MsgType.DATA, Set: MsgType.SET,
    Ack: MsgType.ACK, Del: MsgType.DEL,
    InitBackup: MsgType.INIT_BACKUP, BackupCmd: MsgType.BACKUP_CMD,
    Hello: MsgType.HELLO, MetaKeys: MsgType.META_KEYS,
    MigGet: MsgType.MIG_GET, MigData: MsgType.MIG_DATA,
}


def _pack_str(s: str) -> bytes:
    b = s.encode()
    if len(b) > 0xFFFF:
        raise ProtocolError(f"string field too long ({len(b)} bytes)")
    return struct.pack("!H", len(b)) + b


def _payload(msg) -> bytes:
    t = type(msg)
    if t is Ping:
        return b""
    if t is Pong or t is Bye or t is InitBackup:
        return _pack_str(msg.node_id)
    if t is Get:
        return struct.pack("!Q", msg.req_id) + _pack_str(msg.chunk_id)
    if t is Data:
        return (
            struct.pack("!Q", msg.req_id)
            + _pack_str(msg.chunk_id)
            + struct.pack("!B", 1 if msg.found else 0)
            + msg.payload
        )
    if t is Set:
        return (
            struct.pack("!Q", msg.req_id)
            + _pack_str(msg.chunk_id)
            + struct.pack("!Q", msg.version)
            + msg.payload
        )
    if t is Ack:
        return struct.pack("!QB", msg.req_id, int(msg.status))
    if t is Del:
        return struct.pack("!Q", msg.req_id) + _pack_str(msg.object_key)
    if t is BackupCmd:
        return _pack_str(msg.relay_addr) + struct.pack("!Q", msg.epoch)
    if t is Hello:
        return _pack_str(msg.node_id) + struct.pack("!B", int(msg.role))
    if t is MetaKeys:
        parts = [struct.pack("!I", len(msg.entries))]
        for cid, ver in msg.entries:
            parts.append(_pack_str(cid))
            parts.append(struct.pack("!Q", ver))
        return b"".join(parts)
    if t is MigGet:
        return _pack_str(msg.chunk_id)
    if t is MigData:
        return _pack_str(msg.chunk_id) + struct.pack("!Q", msg.version) + msg.payload
    raise ProtocolError(f"not a wire message: {msg!r}")


def encode_frame(msg) -> bytes:
    body = _payload(msg)
    if 1 + len(body) > MAX_FRAME:
        raise ProtocolError("frame too large")
    return struct.pack("!IB", 1 + len(body), int(_TYPE_OF[type(msg)])) + body


def frame_len(msg) -> int:
    """Wire size of encode_frame(msg) without materializing the bytes."""
    t = type(msg)
    base = 5
    if t is Ping:
        return base
    if t is Pong or t is Bye or t is InitBackup:
        return base + 2 + len(msg.node_id.encode())
    if t is Get:
        return base + 8 + 2 + len(msg.chunk_id.encode())
    if t is Data:
        return base + 8 + 2 + len(msg.chunk_id.encode()) + 1 + len(msg.payload)
    if t is Set:
        return base + 8 + 2 + len(msg.chunk_id.encode()) + 8 + len(msg.payload)
    if t is Ack:
        return base + 9
    if t is Del:
        return base + 8 + 2 + len(msg.object_key.encode())
    if t is BackupCmd:
        return base + 2 + len(msg.relay_addr.encode()) + 8
    if t is Hello:
        return base + 2 + len(msg.node_id.encode()) + 1
    if t is MetaKeys:
        return base + 4 + sum(2 + len(c.encode()) + 8 for c, _ in msg.entries)
    if t is MigGet:
        return base + 2 + len(msg.chunk_id.encode())
    if t is MigData:
        return base + 2 + len(msg.chunk_id.encode()) + 8 + len(msg.payload)
    raise ProtocolError(f"not a wire message: {msg!r}")


class NeedMoreBytes:
    """Singleton result of decode_frame on a truncated buffer."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NeedMoreBytes"


NEED_MORE = NeedMoreBytes()


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated payload")
        v = self.buf[self.pos : self.pos + n]
        self.pos += n
        return v

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("!I", self.take(4))[0]

    def u64(self):
        return struct.unpack("!Q", self.take(8))[0]

    def string(self):
        n = struct.unpack("!H", self.take(2))[0]
        return self.take(n).decode()

    def rest(self):
        v = bytes(self.buf[self.pos :])
        self.pos = len(self.buf)
        return v

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError("trailing bytes in frame payload")


def _parse(mtype: int, body) -> Message:
    r = _Reader(body)
    if mtype == MsgType.PING:
        msg = Ping()
    elif mtype == MsgType.PONG:
        msg = Pong(r.string())
    elif mtype == MsgType.BYE:
        msg = Bye(r.string())
    elif mtype == MsgType.GET:
        msg = Get(r.u64(), r.string())
    elif mtype == MsgType.DATA:
        msg = Data(r.u64(), r.string(), r.u8() != 0, r.rest())
    elif mtype == MsgType.SET:
        msg = Set(r.u64(), r.string(), r.u64(), r.rest())
    elif mtype == MsgType.ACK:
        msg = Ack(r.u64(), AckStatus(r.u8()))
    elif mtype == MsgType.DEL:
        msg = Del(r.u64(), r.string())
    elif mtype == MsgType.INIT_BACKUP:
        msg = InitBackup(r.string())
    elif mtype == MsgType.BACKUP_CMD:
        msg = BackupCmd(r.string(), r.u64())
    elif mtype == MsgType.HELLO:
        msg = Hello(r.string(), BackupRole(r.u8()))
    elif mtype == MsgType.META_KEYS:
        n = r.u32()
        msg = MetaKeys(tuple((r.string(), r.u64()) for _ in range(n)))
    elif mtype == MsgType.MIG_GET:
        msg = MigGet(r.string())
    elif mtype == MsgType.MIG_DATA:
        msg = MigData(r.string(), r.u64(), r.rest())
    else:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}")
    r.done()
    return msg


def decode_frame(buf):
    """Decode one frame from buf.

    Returns NEED_MORE when buf holds less than a full frame, otherwise
    (message, remaining_bytes). Raises ProtocolError on garbage; the caller
    must drop the connection.
    """
    if len(buf) < 4:
        return NEED_MORE
    (length,) = struct.unpack("!I", buf[:4])
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    if len(buf) < 4 + length:
        return NEED_MORE
    try:
        mtype = MsgType(buf[4])
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{buf[4]:02x}") from None
    msg = _parse(mtype, buf[5 : 4 + length])
    return msg, bytes(buf[4 + length :])


# --------------------------------------------------------------------------
# Proxy-side connection FSM: liveness x validity
# --------------------------------------------------------------------------


class Liveness(Enum):
    SLEEPING = "sleeping"
    ACTIVE = "active"
    MAYBE = "maybe"


class Validity(Enum):
    UNVALIDATED = "unvalidated"
    VALIDATING = "validating"
    VALIDATED = "validated"


@dataclass(frozen=True)
class ConnState:
    liveness: Liveness
    validity: Validity

    def __str__(self):
        return f"({self.liveness.value},{self.validity.value})"


class ConnEvent(Enum):
    WANT_SEND = "want_send"
    INVOKED = "invoked"
    GOT_PONG = "got_pong"
    SENT_CHUNK_REQ = "sent_chunk_req"
    GOT_BYE = "got_bye"
    TIMEOUT = "timeout"
    BACKUP_STARTED = "backup_started"
    BACKUP_ENDED = "backup_ended"


class FsmAction(Enum):
    NONE = "none"            # pure state change
    INVOKE = "invoke"        # (re-)invoke the function, ping flag set
    SEND_PING = "send_ping"  # probe liveness before dispatching
    DISPATCH = "dispatch"    # connection validated: send the request now
    QUEUE = "queue"          # hold the request until validation completes
    FLUSH = "flush"          # validated: release one queued request
    REQUEUE = "requeue"      # node returned: requeue in-flight requests
    IGNORE = "ignore"        # legal no-op (stale BYE, source return)


class FsmViolation(Exception):
    pass


_S, _A, _M = Liveness.SLEEPING, Liveness.ACTIVE, Liveness.MAYBE
_U, _G, _V = Validity.UNVALIDATED, Validity.VALIDATING, Validity.VALIDATED
_E = ConnEvent
_X = FsmAction

# The full transition table. Rows the condensed description leaves implicit
# (queueing while validating, stale BYEs after a reset) are included as legal
# no-ops; combinations that cannot arise in a correct run stay absent and
# raise FsmViolation.
PROXY_TRANSITIONS: dict = {
    # sleeping / unvalidated: the parked state between invocations
    (_S, _U, _E.WANT_SEND): (_S, _G, _X.INVOKE),
    (_S, _U, _E.INVOKED): (_S, _G, _X.NONE),
    (_S, _U, _E.GOT_PONG): (_A, _V, _X.FLUSH),  # unsolicited PONG on dial-in
    (_S, _U, _E.GOT_BYE): (_S, _U, _X.IGNORE),
    (_S, _U, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_S, _U, _E.BACKUP_STARTED): (_M, _U, _X.NONE),
    # sleeping / validating: invoke issued, PONG pending
    (_S, _G, _E.WANT_SEND): (_S, _G, _X.QUEUE),
    (_S, _G, _E.GOT_PONG): (_A, _V, _X.FLUSH),
    (_S, _G, _E.GOT_BYE): (_S, _G, _X.IGNORE),  # BYE from a previous life
    (_S, _G, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_S, _G, _E.BACKUP_STARTED): (_M, _G, _X.NONE),
    # active / validated
    (_A, _V, _E.WANT_SEND): (_A, _V, _X.DISPATCH),
    (_A, _V, _E.SENT_CHUNK_REQ): (_A, _U, _X.NONE),
    (_A, _V, _E.GOT_BYE): (_S, _U, _X.REQUEUE),
    (_A, _V, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_A, _V, _E.BACKUP_STARTED): (_M, _V, _X.NONE),
    # active / unvalidated: a request went out since the last PONG
    (_A, _U, _E.WANT_SEND): (_A, _G, _X.SEND_PING),
    (_A, _U, _E.GOT_BYE): (_S, _U, _X.REQUEUE),
    (_A, _U, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_A, _U, _E.BACKUP_STARTED): (_M, _U, _X.NONE),
    # active / validating: PING sent, PONG pending
    (_A, _G, _E.WANT_SEND): (_A, _G, _X.QUEUE),
    (_A, _G, _E.GOT_PONG): (_A, _V, _X.FLUSH),
    (_A, _G, _E.GOT_BYE): (_S, _U, _X.REQUEUE),
    (_A, _G, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_A, _G, _E.BACKUP_STARTED): (_M, _G, _X.NONE),
    # maybe: a backup epoch is in flight; behaves like active for traffic,
    # the source's own BYE is ignored, the destination's BYE ends the epoch
    (_M, _U, _E.WANT_SEND): (_M, _G, _X.SEND_PING),
    (_M, _U, _E.GOT_PONG): (_M, _V, _X.FLUSH),  # destination dial-in
    (_M, _G, _E.WANT_SEND): (_M, _G, _X.QUEUE),
    (_M, _G, _E.GOT_PONG): (_M, _V, _X.FLUSH),
    (_M, _V, _E.WANT_SEND): (_M, _V, _X.DISPATCH),
    (_M, _V, _E.SENT_CHUNK_REQ): (_M, _U, _X.NONE),
    (_M, _U, _E.GOT_BYE): (_M, _U, _X.IGNORE),
    (_M, _G, _E.GOT_BYE): (_M, _G, _X.IGNORE),
    (_M, _V, _E.GOT_BYE): (_M, _V, _X.IGNORE),
    (_M, _U, _E.BACKUP_ENDED): (_S, _U, _X.NONE),
    (_M, _G, _E.BACKUP_ENDED): (_S, _U, _X.NONE),
    (_M, _V, _E.BACKUP_ENDED): (_S, _U, _X.NONE),
    (_M, _U, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_M, _G, _E.TIMEOUT): (_S, _G, _X.INVOKE),
    (_M, _V, _E.TIMEOUT): (_S, _G, _X.INVOKE),
}

CONN_INIT = ConnState(_S, _U)


def proxy_fsm_step(state: ConnState, event: ConnEvent):
    """Pure transition step. Returns (next_state, action)."""
    row = PROXY_TRANSITIONS.get((state.liveness, state.validity, event))
    if row is None:
        raise FsmViolation(f"illegal transition {state} + {event.value}")
    nl, nv, action = row
    return ConnState(nl, nv), action


# --------------------------------------------------------------------------
# Node lifecycle FSM
# --------------------------------------------------------------------------


class NodeState(Enum):
    NOT_RUNNING = "not_running"
    IDLING = "idling"
    SERVING = "serving"
    BACKING_UP = "backing_up"


class NodeEvent(Enum):
    INVOKED = "invoked"
    REQUEST_ARRIVED = "request_arrived"
    REQUEST_DONE = "request_done"
    TIMER_EXPIRED = "timer_expired"
    BACKUP_STARTED = "backup_started"
    BACKUP_ENDED = "backup_ended"


_N = NodeState
_NE = NodeEvent

NODE_TRANSITIONS: dict = {
    (_N.NOT_RUNNING, _NE.INVOKED): _N.IDLING,  # sends PONG when ping flagged
    (_N.IDLING, _NE.REQUEST_ARRIVED): _N.SERVING,
    (_N.SERVING, _NE.REQUEST_ARRIVED): _N.SERVING,  # pipelined requests
    (_N.SERVING, _NE.REQUEST_DONE): _N.IDLING,
    (_N.IDLING, _NE.TIMER_EXPIRED): _N.NOT_RUNNING,  # sends BYE, returns
    (_N.IDLING, _NE.BACKUP_STARTED): _N.BACKING_UP,
    (_N.SERVING, _NE.BACKUP_STARTED): _N.BACKING_UP,
    # an epoch pins the instance: traffic interleaves, the timer cannot
    # retire it (each crossed cycle is recorded as an Extend decision)
    (_N.BACKING_UP, _NE.REQUEST_ARRIVED): _N.BACKING_UP,
    (_N.BACKING_UP, _NE.REQUEST_DONE): _N.BACKING_UP,
    (_N.BACKING_UP, _NE.TIMER_EXPIRED): _N.BACKING_UP,
    (_N.BACKING_UP, _NE.BACKUP_ENDED): _N.IDLING,
}


def node_fsm_step(state: NodeState, event: NodeEvent) -> NodeState:
    nxt = NODE_TRANSITIONS.get((state, event))
    if nxt is None:
        raise FsmViolation(f"illegal node transition {state.value} + {event.value}")
    return nxt
