import json
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polqkd.config import Config
from polqkd.link import session as session_mod
from polqkd.link import wire
from polqkd.link.session import MAX_FAILED_BLOCKS, collect_statistics, run_session
from polqkd.link.transport import OrderViolation, Tap, TapRecord, check_order, queue_pair, tcp_pair
from polqkd.link.wire import FrameError, LinkMessage, MsgType, frame_decode, frame_decode_prefix, frame_encode


@pytest.fixture(scope="module")
def session_50km():
    cfg = Config().replace(fiber_length=50.0, n_z_pa=819_200)
    tap = Tap()
    return cfg, run_session(cfg, 2024, tap=tap)


# -- framing ------------------------------------------------------------------------


def test_abort_frame_is_five_bytes():
    frame = frame_encode(LinkMessage(MsgType.ABORT))
    assert frame == b"\x09\x00\x00\x00\x00"
    assert frame_decode(frame) == LinkMessage(MsgType.ABORT, b"")


def test_header_layout():
    frame = frame_encode(LinkMessage(MsgType.PARITY_RESP, b"abc"))
    assert frame[0] == 4 and struct.unpack("<I", frame[1:5])[0] == 3 and frame[5:] == b"abc"


def test_random_round_trips():
    rng = np.random.default_rng(0)
    types = list(MsgType)
    for _ in range(10_000):
        payload = rng.integers(0, 256, int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        msg = LinkMessage(types[int(rng.integers(len(types)))], payload)
        assert frame_decode(frame_encode(msg)) == msg


@settings(max_examples=200)
@given(st.sampled_from(list(MsgType)), st.binary(max_size=300), st.data())
def test_truncated_frames_never_decode(mtype, payload, data):
    frame = frame_encode(LinkMessage(mtype, payload))
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(FrameError):
        frame_decode(frame[:cut])
    assert frame_decode_prefix(frame[:cut]) == (None, 0)


def test_unknown_type_and_trailing_bytes():
    with pytest.raises(FrameError, match="unknown"):
        frame_decode(b"\x00\x00\x00\x00\x00")
    with pytest.raises(FrameError, match="trailing"):
        frame_decode(frame_encode(LinkMessage(MsgType.ABORT)) + b"x")


def test_prefix_decoding_of_a_stream():
    frames = [LinkMessage(MsgType.VERIFY_ACK, b"\x01\x00\x00\x00\x01"), LinkMessage(MsgType.ABORT, b"bye")]
    stream = b"".join(frame_encode(m) for m in frames)
    msg, used = frame_decode_prefix(stream)
    assert msg == frames[0]
    assert frame_decode(stream[used:]) == frames[1]


def test_bit_packing_is_lsb_first():
    assert wire.pack_bits([1, 0, 0, 0, 0, 0, 0, 0, 1]) == b"\x01\x01"
    assert wire.unpack_bits(b"\x03", 3).tolist() == [1, 1, 0]
    with pytest.raises(FrameError):
        wire.unpack_bits(b"\x03\x00", 3)


def test_body_codecs_round_trip():
    rng = np.random.default_rng(1)
    slots = np.sort(rng.choice(10**12, 50, replace=False)).astype(np.int64)
    bases = rng.integers(0, 2, 50, dtype=np.uint8)
    x_out = rng.integers(0, 2, int(bases.sum()), dtype=np.uint8)
    covered, s2, b2, x2 = wire.decode_announce(wire.encode_announce(10**12 + 5, slots, bases, x_out))
    assert covered == 10**12 + 5 and np.array_equal(s2, slots) and np.array_equal(b2, bases) and np.array_equal(x2, x_out)

    keep = rng.integers(0, 2, 50).astype(bool)
    x_int = rng.integers(0, 2, 7, dtype=np.uint8)
    k2, xi2 = wire.decode_sift_reply(wire.encode_sift_reply(keep, x_int))
    assert np.array_equal(k2, keep) and np.array_equal(xi2, x_int)

    ranges = np.array([[0, 0, 64], [3, 128, 4096]])
    blk, seed, passes, r2 = wire.decode_parity_req(wire.encode_parity_req(7, 2**63 - 1, 16, ranges))
    assert (blk, seed, passes) == (7, 2**63 - 1, 16) and np.array_equal(r2, ranges)

    assert wire.decode_parity_resp(wire.encode_parity_resp(3, [1, 0, 1]))[1].tolist() == [1, 0, 1]
    tag = rng.integers(0, 2, 64, dtype=np.uint8)
    blk, seed, t2 = wire.decode_verify(wire.encode_verify(9, 123, tag))
    assert (blk, seed) == (9, 123) and np.array_equal(t2, tag)
    assert wire.decode_verify_ack(wire.encode_verify_ack(4, True)) == (4, True)

    seed_bits = rng.integers(0, 2, 1000, dtype=np.uint8)
    l, prng, counter, bits = wire.decode_pa_seed(wire.encode_pa_seed(42, 77, 1, seed_bits))
    assert (l, prng, counter) == (42, 77, 1) and np.array_equal(bits, seed_bits)

    stats = wire.StatsBody((1, 2), (3, 4), (0, 1), 5, 600, 0, 10**10)
    assert wire.decode_stats(wire.encode_stats(stats)) == stats
    with pytest.raises(FrameError):
        wire.decode_stats(b"\x00")
    with pytest.raises(FrameError):
        wire.decode_verify_ack(b"\x00\x00\x00\x00\x01\x02")


# -- transports -------------------------------------------------------------------


@pytest.mark.parametrize("pair", [queue_pair, tcp_pair])
def test_transport_moves_frames_in_order(pair):
    tap = Tap()
    a, b = pair(tap, timeout=5.0)
    try:
        msgs = [LinkMessage(MsgType.PARITY_RESP, bytes([i]) * i) for i in range(20)]
        for m in msgs:
            a.send(m)
        assert [b.recv() for _ in msgs] == msgs
        b.send(LinkMessage(MsgType.ABORT, b"done"))
        assert a.recv().payload == b"done"
    finally:
        a.close()
        b.close()
    assert [r.sender for r in tap.records] == ["alice"] * 20 + ["bob"]


def test_tcp_handles_large_frames():
    a, b = tcp_pair(timeout=5.0)
    try:
        big = LinkMessage(MsgType.PA_SEED, bytes(range(256)) * 5000)
        a.send(big)
        assert b.recv() == big
    finally:
        a.close()
        b.close()


def _rec(sender, mtype, payload=b""):
    return TapRecord(sender, mtype, len(payload), payload)


def test_order_checker_flags_violations():
    ann = wire.encode_announce(10, np.arange(4), np.zeros(4, np.uint8), np.zeros(0, np.uint8))
    reply = wire.encode_sift_reply(np.ones(4, bool), np.zeros(0, np.uint8))
    req = wire.encode_parity_req(0, 1, 16, np.array([[0, 0, 2]]))
    with pytest.raises(OrderViolation, match="PARITY_REQ"):
        check_order([_rec("bob", MsgType.BASIS_ANNOUNCE, ann), _rec("bob", MsgType.PARITY_REQ, req)], 1, 4)
    ok = [_rec("bob", MsgType.BASIS_ANNOUNCE, ann), _rec("alice", MsgType.SIFT_REPLY, reply), _rec("bob", MsgType.PARITY_REQ, req)]
    check_order(ok, 1, 4)
    with pytest.raises(OrderViolation, match="PA_SEED"):
        check_order(ok + [_rec("alice", MsgType.PA_SEED, b"")], 1, 4)
    acked = ok + [_rec("alice", MsgType.VERIFY_ACK, wire.encode_verify_ack(0, True)), _rec("alice", MsgType.PA_SEED, b"")]
    check_order(acked, 1, 4)
    with pytest.raises(OrderViolation, match="after ABORT"):
        check_order([_rec("bob", MsgType.ABORT), _rec("alice", MsgType.SIFT_REPLY, reply)], 1, 4)


# -- sessions ---------------------------------------------------------------------


def test_session_produces_equal_keys(session_50km):
    cfg, res = session_50km
    rep = res.report
    assert not rep.aborted and rep.cause == ""
    assert rep.l_total > 0 and len(res.alice_key) == rep.l_total
    assert np.array_equal(res.alice_key, res.bob_key)
    assert rep.l_total == rep.bounds.l
    assert 0 <= rep.qber_z < 0.03 and 0 <= rep.qber_x < 0.03
    assert rep.skr == pytest.approx(rep.l_total / (rep.slots_sent / cfg.protocol.rep_rate))


def test_session_obeys_protocol_order(session_50km):
    cfg, res = session_50km
    check_order(res.tap.records, cfg.protocol.blocks_per_pa, cfg.protocol.n_z_ec)
    types = [r.type for r in res.tap.records]
    assert types.count(MsgType.VERIFY) == cfg.protocol.blocks_per_pa + res.report.blocks_failed
    assert types[-1] == MsgType.PA_SEED


def test_leak_equals_metered_parity_bits(session_50km):
    cfg, res = session_50km
    parity_bits = sum(len(wire.decode_parity_resp(r.payload)[1]) for r in res.tap.records if r.type == MsgType.PARITY_RESP)
    verify_bits = sum(len(wire.decode_verify(r.payload)[2]) for r in res.tap.records if r.type == MsgType.VERIFY)
    assert res.report.blocks_failed == 0
    assert res.report.leak == parity_bits + verify_bits
    assert res.report.bounds.lambda_ec == res.report.leak


def test_no_z_key_bits_on_the_wire(session_50km):
    _, res = session_50km
    sent_by = {r.sender for r in res.tap.records if r.type in (MsgType.BASIS_ANNOUNCE, MsgType.PARITY_REQ, MsgType.VERIFY)}
    assert sent_by == {"bob"}
    assert {r.sender for r in res.tap.records if r.type in (MsgType.SIFT_REPLY, MsgType.PARITY_RESP)} == {"alice"}


def test_session_is_deterministic(session_50km):
    cfg, first = session_50km
    tap = Tap()
    again = run_session(cfg, 2024, tap=tap)
    assert again.report.to_json() == first.report.to_json()
    assert tap.transcript() == first.tap.transcript()
    assert np.array_equal(again.alice_key, first.alice_key)


def test_tcp_transport_matches_queue(session_50km):
    cfg, first = session_50km
    other = run_session(cfg, 2024, transport="tcp")
    assert other.report.to_json() == first.report.to_json()


def test_dead_channel_aborts():
    cfg = Config().replace(efficiency=0.0, dark_rate=0.0, n_z_ec=1024, n_z_pa=8192)
    tap = Tap()
    res = run_session(cfg, 0, tap=tap)
    assert res.report.aborted and res.report.cause == "no detections"
    assert res.report.l_total == 0 and len(res.alice_key) == 0
    assert tap.records[-1].type == MsgType.ABORT


def test_verification_failure_budget(monkeypatch):
    real = session_mod.verify_tag

    def alice_disagrees(block, seed, n_bits):
        tag = real(block, seed, n_bits).copy()
        # Alice runs in the worker thread, Bob in the caller's
        if threading.current_thread() is not threading.main_thread():
            tag[0] ^= 1
        return tag

    monkeypatch.setattr(session_mod, "verify_tag", alice_disagrees)
    cfg = Config().replace(fiber_length=25.0, n_z_ec=1024, n_z_pa=65536)
    res = run_session(cfg, 3)
    assert res.report.aborted
    assert res.report.blocks_failed == MAX_FAILED_BLOCKS + 1
    assert "budget" in res.report.cause
    assert res.report.l_total == 0


def test_reconciliation_above_cap_aborts(session_50km):
    cfg, res = session_50km
    assert not res.report.aborted
    # no real Cascade run reaches the Shannon limit, so a cap of 1 always trips
    capped = run_session(cfg.replace(f_ec_cap=1.0), 2024)
    assert capped.report.aborted
    assert "efficiency" in capped.report.cause and capped.report.l_total == 0


def test_report_json_round_trip(session_50km):
    _, res = session_50km
    data = json.loads(res.report.to_json())
    assert data["l_total"] == res.report.l_total
    assert set(data["bounds"]) >= {"s_z0_low", "s_z1_low", "phi_z_high", "l"}


def test_session_traces(tmp_path):
    cfg = Config().replace(fiber_length=25.0, n_z_ec=1024, n_z_pa=8192, misalignment_angle0=0.1)
    trace, fb = tmp_path / "t.csv", tmp_path / "fb.csv"
    res = run_session(cfg, 1, trace_path=trace, feedback_trace_path=fb)
    assert not res.report.aborted
    assert trace.read_text().startswith("slot,")
    assert len(fb.read_text().splitlines()) == 1 + cfg.protocol.blocks_per_pa


def test_collect_statistics_truth_is_consistent():
    cfg = Config().replace(fiber_length=50.0, n_z_pa=819_200)
    c = collect_statistics(cfg, 5)
    assert c.tallies.n_z.sum() == cfg.protocol.n_z_pa
    assert c.truth["z0"] + c.truth["z1"] <= cfg.protocol.n_z_pa
    assert c.bounds.s_z0_low <= c.truth["z0"] <= c.bounds.s_z0_high
    assert c.bounds.s_z1_low <= c.truth["z1"]
