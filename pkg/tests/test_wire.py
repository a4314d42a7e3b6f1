"""Wire format and state machine tests.

Golden byte layouts are frozen here by hand from the framing rules
(4-byte big-endian length of type+payload, then the type octet).
"""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fncache import wire
from fncache.wire import (
    NEED_MORE,
    Ack,
    AckStatus,
    BackupCmd,
    BackupRole,
    Bye,
    ConnEvent,
    ConnState,
    Data,
    Del,
    FsmAction,
    FsmViolation,
    Get,
    Hello,
    InitBackup,
    Liveness,
    MetaKeys,
    MigData,
    MigGet,
    MsgType,
    Ping,
    Pong,
    ProtocolError,
    Set,
    Validity,
    decode_frame,
    encode_frame,
    frame_len,
    node_fsm_step,
    proxy_fsm_step,
)


class TestGoldenFrames:
    def test_ping(self):
        assert encode_frame(Ping()) == bytes.fromhex("0000000101")

    def test_pong(self):
        # length = type byte + 2-byte string prefix + 2 chars = 5
        got = encode_frame(Pong(node_id="n1"))
        assert got == bytes.fromhex("0000000502") + b"\x00\x02n1"

    def test_bye(self):
        got = encode_frame(Bye(node_id="n1"))
        assert got == bytes.fromhex("0000000503") + b"\x00\x02n1"

    def test_get(self):
        got = encode_frame(Get(req_id=7, chunk_id="img#3"))
        want = (
            b"\x00\x00\x00\x10"      # len = 1 + 8 + 2 + 5
            b"\x10"                   # GET
            b"\x00\x00\x00\x00\x00\x00\x00\x07"
            b"\x00\x05img#3"
        )
        assert got == want

    def test_set_carries_version_and_raw_tail(self):
        got = encode_frame(Set(req_id=1, chunk_id="k#0", version=2, payload=b"\xff\x00"))
        want = (
            b"\x00\x00\x00\x18"
            b"\x12"
            + (1).to_bytes(8, "big")
            + b"\x00\x03k#0"
            + (2).to_bytes(8, "big")
            + b"\xff\x00"
        )
        assert got == want

    def test_ack(self):
        got = encode_frame(Ack(req_id=3, status=AckStatus.STALE))
        assert got == b"\x00\x00\x00\x0a\x13" + (3).to_bytes(8, "big") + b"\x01"


ALL_MESSAGES = [
    Ping(),
    Pong(node_id="node-07"),
    Bye(node_id="node-07"),
    Get(req_id=12, chunk_id="photo#11"),
    Data(req_id=12, chunk_id="photo#11", found=True, payload=b"\x00" * 17),
    Data(req_id=13, chunk_id="photo#9", found=False, payload=b""),
    Set(req_id=99, chunk_id="a#0", version=1, payload=b"payload"),
    Ack(req_id=99, status=AckStatus.OK),
    Ack(req_id=99, status=AckStatus.OVERFLOW),
    Del(req_id=100, object_key="a"),
    InitBackup(node_id="node-07"),
    BackupCmd(relay_addr="relay:1", epoch=5),
    Hello(node_id="node-07", role=BackupRole.SOURCE),
    Hello(node_id="node-08", role=BackupRole.DESTINATION),
    MetaKeys(entries=(("a#0", 3), ("b#1", 1))),
    MetaKeys(entries=()),
    MigGet(chunk_id="a#0"),
    MigData(chunk_id="a#0", version=3, payload=b"zz"),
    MigData(chunk_id="b#9", version=0, payload=b""),  # absent marker
]


@pytest.mark.parametrize("msg", ALL_MESSAGES, ids=lambda m: type(m).__name__)
def test_roundtrip_every_variant(msg):
    buf = encode_frame(msg)
    assert len(buf) == frame_len(msg)
    out, rest = decode_frame(buf)
    assert out == msg
    assert rest == b""


def test_two_frames_back_to_back():
    buf = encode_frame(Ping()) + encode_frame(Pong(node_id="x"))
    m1, rest = decode_frame(buf)
    m2, rest = decode_frame(rest)
    assert m1 == Ping()
    assert m2 == Pong(node_id="x")
    assert rest == b""


def test_need_more_is_singleton_and_progressive():
    buf = encode_frame(Get(req_id=5, chunk_id="k#1"))
    for cut in range(len(buf)):
        assert decode_frame(buf[:cut]) is NEED_MORE
    out, rest = decode_frame(buf)
    assert out == Get(req_id=5, chunk_id="k#1")
    assert rest == b""


def test_unknown_type_raises():
    with pytest.raises(ProtocolError):
        decode_frame(b"\x00\x00\x00\x01\x7f")


def test_zero_length_frame_raises():
    with pytest.raises(ProtocolError):
        decode_frame(b"\x00\x00\x00\x00")


def test_oversized_frame_raises():
    hdr = (wire.MAX_FRAME + 1).to_bytes(4, "big") + b"\x01"
    with pytest.raises(ProtocolError):
        decode_frame(hdr)


def test_truncated_payload_raises():
    # length says 6 bytes follow but the string prefix promises more
    bad = b"\x00\x00\x00\x04\x02\x00\x09x"
    with pytest.raises(ProtocolError):
        decode_frame(bad)


def test_trailing_garbage_in_payload_raises():
    bad = b"\x00\x00\x00\x02\x01\x00"  # PING with a stray byte inside the frame
    with pytest.raises(ProtocolError):
        decode_frame(bad)


def test_string_too_long_rejected_on_encode():
    with pytest.raises(ProtocolError):
        encode_frame(Pong(node_id="x" * 70_000))


@settings(max_examples=150, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**64 - 1),
    st.text(min_size=1, max_size=40).filter(lambda s: "#" not in s),
    st.integers(min_value=0, max_value=2**64 - 1),
    st.binary(max_size=600),
)
def test_set_roundtrip_property(req_id, key, version, payload):
    msg = Set(req_id=req_id, chunk_id=key + "#0", version=version, payload=payload)
    out, rest = decode_frame(encode_frame(msg))
    assert out == msg and rest == b""


def test_frame_len_agrees_for_all(subtests=None):
    for msg in ALL_MESSAGES:
        assert frame_len(msg) == len(encode_frame(msg)), msg


# ---------------------------------------------------------------- FSM tables

S, A, M = Liveness.SLEEPING, Liveness.ACTIVE, Liveness.MAYBE
U, G, V = Validity.UNVALIDATED, Validity.VALIDATING, Validity.VALIDATED


def step(lv, va, ev):
    return proxy_fsm_step(ConnState(lv, va), ev)


class TestProxyFsm:
    def test_cold_send_invokes(self):
        st_, act = step(S, U, ConnEvent.WANT_SEND)
        assert (st_.liveness, st_.validity, act) == (S, G, FsmAction.INVOKE)

    def test_invoked_marks_validating(self):
        st_, act = step(S, U, ConnEvent.INVOKED)
        assert (st_.liveness, st_.validity, act) == (S, G, FsmAction.NONE)

    def test_send_while_validating_queues(self):
        st_, act = step(S, G, ConnEvent.WANT_SEND)
        assert (st_.liveness, st_.validity, act) == (S, G, FsmAction.QUEUE)

    def test_pong_validates_and_flushes(self):
        st_, act = step(S, G, ConnEvent.GOT_PONG)
        assert (st_.liveness, st_.validity, act) == (A, V, FsmAction.FLUSH)

    def test_unsolicited_pong_also_validates(self):
        # a node dialing in on its own (backup destination) skips VALIDATING
        st_, act = step(S, U, ConnEvent.GOT_PONG)
        assert (st_.liveness, st_.validity, act) == (A, V, FsmAction.FLUSH)

    def test_validated_send_dispatches_directly(self):
        st_, act = step(A, V, ConnEvent.WANT_SEND)
        assert (st_.liveness, st_.validity, act) == (A, V, FsmAction.DISPATCH)

    def test_first_chunk_req_downgrades_validity(self):
        st_, act = step(A, V, ConnEvent.SENT_CHUNK_REQ)
        assert (st_.liveness, st_.validity) == (A, U)

    def test_bye_from_active_requeues(self):
        st_, act = step(A, U, ConnEvent.GOT_BYE)
        assert (st_.liveness, st_.validity, act) == (S, U, FsmAction.REQUEUE)

    def test_stale_bye_ignored_when_sleeping(self):
        for va in (U, G):
            st_, act = step(S, va, ConnEvent.GOT_BYE)
            assert act == FsmAction.IGNORE
            assert st_.validity == va

    def test_backup_moves_to_maybe_and_back(self):
        st_, act = step(A, V, ConnEvent.BACKUP_STARTED)
        assert st_.liveness == M
        st2, _ = proxy_fsm_step(st_, ConnEvent.BACKUP_ENDED)
        assert (st2.liveness, st2.validity) == (S, U)

    def test_maybe_serves_like_active(self):
        st_, act = step(M, V, ConnEvent.WANT_SEND)
        assert act == FsmAction.DISPATCH
        st_, act = step(M, U, ConnEvent.WANT_SEND)
        assert act == FsmAction.SEND_PING

    def test_maybe_ignores_source_bye(self):
        _, act = step(M, V, ConnEvent.GOT_BYE)
        assert act == FsmAction.IGNORE

    def test_timeout_reinvokes_from_any_reachable_state(self):
        for lv in (S, A, M):
            for va in (U, G, V):
                if (lv, va) == (S, V):
                    continue  # unreachable: nothing produces sleeping+validated
                st_, act = step(lv, va, ConnEvent.TIMEOUT)
                assert act == FsmAction.INVOKE
                assert (st_.liveness, st_.validity) == (S, G)

    def test_unknown_combination_raises(self):
        with pytest.raises(FsmViolation):
            step(S, U, ConnEvent.SENT_CHUNK_REQ)

    def test_active_unvalidated_send_pings_first(self):
        st_, act = step(A, U, ConnEvent.WANT_SEND)
        assert (st_.validity, act) == (G, FsmAction.SEND_PING)

    def test_table_rows_well_formed(self):
        for key, row in wire.PROXY_TRANSITIONS.items():
            lv, va, ev = key
            assert isinstance(lv, Liveness)
            assert isinstance(va, Validity)
            assert isinstance(ev, ConnEvent)
            nxt_lv, nxt_va, act = row
            assert isinstance(nxt_lv, Liveness)
            assert isinstance(nxt_va, Validity)
            assert isinstance(act, FsmAction)

    def test_dispatch_only_from_validated(self):
        # the safety core of criterion: no dispatch out of an unvalidated state
        for (lv, va, ev), (_, _, act) in wire.PROXY_TRANSITIONS.items():
            if act == FsmAction.DISPATCH:
                assert va == V


class TestNodeFsm:
    def test_lifecycle_happy_path(self):
        from fncache.wire import NodeEvent, NodeState

        s = NodeState.NOT_RUNNING
        s = node_fsm_step(s, NodeEvent.INVOKED)
        assert s == NodeState.IDLING
        s = node_fsm_step(s, NodeEvent.REQUEST_ARRIVED)
        assert s == NodeState.SERVING
        s = node_fsm_step(s, NodeEvent.REQUEST_ARRIVED)  # pipelined second req
        assert s == NodeState.SERVING
        s = node_fsm_step(s, NodeEvent.REQUEST_DONE)
        assert s == NodeState.IDLING
        s = node_fsm_step(s, NodeEvent.TIMER_EXPIRED)
        assert s == NodeState.NOT_RUNNING

    def test_backup_holds_through_timer(self):
        from fncache.wire import NodeEvent, NodeState

        s = node_fsm_step(NodeState.IDLING, NodeEvent.BACKUP_STARTED)
        assert s == NodeState.BACKING_UP
        # a duration boundary during migration must not stop the instance
        s = node_fsm_step(s, NodeEvent.TIMER_EXPIRED)
        assert s == NodeState.BACKING_UP
        s = node_fsm_step(s, NodeEvent.REQUEST_ARRIVED)
        assert s == NodeState.BACKING_UP
        s = node_fsm_step(s, NodeEvent.BACKUP_ENDED)
        assert s == NodeState.IDLING

    def test_illegal_transition_raises(self):
        from fncache.wire import NodeEvent, NodeState

        with pytest.raises(FsmViolation):
            node_fsm_step(NodeState.NOT_RUNNING, NodeEvent.REQUEST_ARRIVED)
