import socket
import threading

import numpy as np
import pytest

from stochimg import kernels
from stochimg.channel import ChannelConfig, ChannelMode, UdpTransport
from stochimg.experiments import synthetic_image
from stochimg.image import tile
from stochimg.model import make_plan, normalize_values, uniform_values
from stochimg.protocol import (AgreementFailed, ProtocolError, Receiver, ReceiverPhase,
                               Sender, SenderPhase, SimulatedSession, run_agreement,
                               run_block_phase, run_simulated_session, serve_udp,
                               trial_stream_keys)
from stochimg.sampler import build_alias
from stochimg.wire import (AgreementRequest, WireSession, ack_packet, encode,
                           fragment_packet, request_packet)


def setup(width=64, height=32, block=8, ratio=1.0, loss=0.0, packet=None, values=None):
    img = synthetic_image(width, height, 1, seed=1)
    grid, payloads = tile(img, block, block)
    vm = normalize_values(values) if values is not None else uniform_values(grid.count)
    plan = make_plan(vm, grid.block_bytes, packet or grid.block_bytes, ratio, loss)
    return img, grid, payloads, plan


@pytest.mark.parametrize("packet", [64, 16])
def test_lossless_session_recovers_every_sent_block(packet):
    img, grid, payloads, plan = setup(ratio=3.0, packet=packet)
    res = run_simulated_session(plan, grid, payloads, seed=4)
    sent = {r.block_id for r in res.send_log}
    assert set(res.report.received_ids) == sent
    by_id = {p.block_id: p.data for p in payloads}
    _, got = tile(res.partial.image, 8, 8)
    for p in got:
        assert (p.data == by_id[p.block_id]) == (p.block_id in sent)
    if len(sent) == grid.count:
        assert res.partial.image == img


def test_large_budget_reconstructs_image_exactly():
    img, grid, payloads, plan = setup(ratio=20.0)
    res = run_simulated_session(plan, grid, payloads, seed=0)
    assert res.report.unique_blocks == grid.count
    assert res.partial.image == img


def test_send_log_contract():
    _, grid, payloads, plan = setup(ratio=2.0, loss=0.4)
    res = run_simulated_session(plan, grid, payloads, seed=9, mode="sim-packet",
                                send_interval_us=250, lossy_agreement=False)
    n = plan.total_transmissions
    assert [r.sequence for r in res.send_log] == list(range(n))
    assert res.sender.sent_count == n and res.sender.requests_sent == 1
    assert res.channel_stats["data_sent"] == n * plan.fragments_per_block
    times = np.array([r.timestamp for r in res.send_log])
    assert np.allclose(times, np.arange(n) * 250e-6, rtol=0, atol=1e-12)
    assert res.sender.duration <= (n + 1) * 250e-6


@pytest.mark.parametrize("mode,packet,lossy", [("sim-packet", 32, True),
                                               ("sim-block", 32, True),
                                               ("sim-packet", 64, True),
                                               ("sim-packet", 16, False)])
def test_session_matches_vectorised_kernel(mode, packet, lossy):
    _, grid, payloads, plan = setup(ratio=1.5, loss=0.3, packet=packet,
                                    values=np.arange(1, 33, dtype=float))
    k = plan.fragments_per_block
    prob, alias = build_alias(plan.probabilities)
    for seed in range(6):
        try:
            res = run_simulated_session(plan, grid, payloads, seed=seed, mode=mode,
                                        lossy_agreement=lossy)
        except AgreementFailed:
            continue
        sk, lk = trial_stream_keys(seed)
        per_packet = mode == "sim-packet"
        thr = 0.3 if per_packet else 0.3 ** k
        offset = res.data_units_before_block_phase if lossy else 0
        got = kernels.simulate_trials(prob, alias, plan.total_transmissions, k, thr,
                                      per_packet, [sk], [lk], offset)[0]
        assert np.flatnonzero(got).tolist() == res.report.received_ids


def test_agreement_gives_up_after_four_retransmissions():
    _, grid, payloads, plan = setup()
    rx = Receiver()
    link = SimulatedSession(rx, ChannelConfig(ChannelMode.SIM_PACKET, 0.0),
                            reverse=ChannelConfig(ChannelMode.SIM_PACKET, 1.0))
    sender = Sender(plan, grid, payloads, seed=1)
    with pytest.raises(AgreementFailed):
        run_agreement(sender, link)
    assert sender.requests_sent == 5
    assert rx.agreement_requests == 5
    assert link.now() == pytest.approx(2 + 4 + 8 + 16 + 32)


def test_lost_ack_triggers_one_retransmission():
    _, grid, payloads, plan = setup()
    rx = Receiver()
    link = SimulatedSession(rx, ChannelConfig(ChannelMode.SIM_PACKET, 0.0),
                            reverse=ChannelConfig(ChannelMode.SCRIPTED, drop_list={1}))
    sender = Sender(plan, grid, payloads, seed=1)
    ack = run_agreement(sender, link)
    assert ack.session_id == sender.session_id
    assert sender.requests_sent == 2 and rx.agreement_requests == 2
    assert sender.phase is SenderPhase.TRANSMITTING


def test_block_phase_requires_agreement():
    _, grid, payloads, plan = setup()
    with pytest.raises(ProtocolError):
        run_block_phase(Sender(plan, grid, payloads, seed=0), None)


def test_sender_validation():
    _, grid, payloads, plan = setup()
    with pytest.raises(ProtocolError):
        Sender(plan, grid, payloads[:-1], seed=0)
    with pytest.raises(ProtocolError):
        Sender(plan, grid, payloads, seed=0, send_interval_us=0)
    _, grid2, payloads2, _ = setup(block=16)
    with pytest.raises(ProtocolError):
        Sender(plan, grid2, payloads2, seed=0)


REQ = AgreementRequest(session_id=77, block_id_bits=1, total_transmissions=4, width=4,
                       height=2, channels=1, block_width=2, block_height=2, packet_size=2,
                       send_interval_us=1000)
SESSION = WireSession(1, 1, 2)


def agreed_receiver(**kw):
    rx = Receiver(guard_intervals=2, **kw)
    replies = rx.ingest(encode(request_packet(5, REQ)), now=0.0)
    assert replies == [encode(ack_packet(5, 77))]
    assert rx.phase is ReceiverPhase.RECEIVING
    assert rx.deadline == pytest.approx(6e-3)
    return rx


def frag(block, index, payload, mid=1):
    return encode(fragment_packet(mid, SESSION, block, index, payload))


def test_receiver_merges_fragments_across_attempts():
    rx = agreed_receiver()
    rx.ingest(frag(0, 0, b"ab"), 0.001)
    assert rx.fragment_mask(0) == 0b01 and not rx.received_blocks()
    rx.ingest(frag(0, 0, b"ab"), 0.002)
    rx.ingest(frag(0, 1, b"cd"), 0.003)
    assert rx.received_blocks() == {0}
    partial, report = rx.finalize(0.01)
    assert report.duplicate_fragments == 1 and report.data_packets == 3
    assert partial.image.pixels == b"ab\x00\x00cd\x00\x00"


def test_receiver_counts_junk_late_and_foreign_traffic():
    rx = agreed_receiver(fill=9)
    assert rx.ingest(b"\x00", 0.001) == []
    other = AgreementRequest(**{**REQ.__dict__, "session_id": 78})
    assert rx.ingest(encode(request_packet(6, other)), 0.001) == []
    assert rx.ingest(encode(request_packet(5, REQ)), 0.001) == [encode(ack_packet(5, 77))]
    assert rx.deadline == pytest.approx(7e-3)  # re-anchored by the repeated request
    rx.ingest(frag(1, 0, b"zz"), 0.0075)
    assert rx.undecodable == 1 and rx.foreign_requests == 1 and rx.late_packets == 1
    with pytest.raises(ProtocolError):
        rx.finalize(0.0065)
    partial, report = rx.finalize(0.0071)
    assert set(partial.image.pixels) == {9} and report.unique_blocks == 0
    assert rx.finalize(1.0) == (partial, report)
    rx.ingest(frag(0, 0, b"ab"), 2.0)
    assert rx.late_packets == 2


def test_repeated_request_moves_deadline_only_before_data():
    rx = agreed_receiver()
    rx.ingest(encode(request_packet(5, REQ)), 4.0)
    assert rx.deadline == pytest.approx(4.006)
    rx.ingest(frag(0, 0, b"ab"), 4.001)
    rx.ingest(encode(request_packet(5, REQ)), 4.002)
    assert rx.deadline == pytest.approx(4.006)


def test_receiver_finalizes_early_when_complete():
    rx = agreed_receiver()
    for b in (0, 1):
        for f in (0, 1):
            rx.ingest(frag(b, f, b"xy"), 0.001)
    assert rx.complete and rx.can_finalize(0.001)


def test_fragments_before_agreement_are_undecodable():
    rx = Receiver()
    rx.ingest(frag(0, 0, b"ab"), 0.0)
    assert rx.undecodable == 1
    with pytest.raises(ProtocolError):
        rx.finalize(1.0)


def test_udp_session_end_to_end():
    img, grid, payloads, plan = setup(ratio=20.0, packet=16)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    rx = Receiver(guard_intervals=500)
    out = {}
    thread = threading.Thread(target=lambda: out.update(r=serve_udp(rx, sock, agreement_wait=10)))
    thread.start()
    tx = UdpTransport(sock.getsockname(), bind=("127.0.0.1", 0))
    sender = Sender(plan, grid, payloads, seed=3, send_interval_us=100)
    try:
        run_agreement(sender, tx)
        log = run_block_phase(sender, tx)
    finally:
        tx.close()
        thread.join(20)
        sock.close()
    partial, report = out["r"]
    assert len(log) == plan.total_transmissions
    assert set(report.received_ids) <= {r.block_id for r in log}
    if report.unique_blocks == grid.count:
        assert partial.image == img
