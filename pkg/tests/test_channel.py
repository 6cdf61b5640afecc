import math
import socket

import numpy as np
import pytest

from stochimg.channel import (ChannelClosed, ChannelConfig, ChannelMode, PacketDrops,
                              SimChannel, UdpTransport, read_drop_script, recv, send)


def cfg(mode, loss=0.0, seed=0, **kw):
    return ChannelConfig(ChannelMode(mode), loss, seed, **kw)


def test_packet_loss_rate_within_band():
    ch = SimChannel(cfg("sim-packet", 0.3, seed=11))
    fates = [ch.send(b"x") for _ in range(20_000)]
    rate = 1 - np.mean(fates)
    assert abs(rate - 0.3) < 4 * math.sqrt(0.3 * 0.7 / 20_000)
    assert ch.dropped == fates.count(False) and ch.sent == 20_000


def test_same_seed_same_fate():
    a = SimChannel(cfg("sim-packet", 0.5, seed=3))
    b = SimChannel(cfg("sim-packet", 0.5, seed=3))
    c = SimChannel(cfg("sim-packet", 0.5, seed=4))
    fa = [a.send(b"x") for _ in range(200)]
    assert fa == [b.send(b"x") for _ in range(200)]
    assert fa != [c.send(b"x") for _ in range(200)]


def test_block_mode_drops_whole_bursts_at_l_to_the_k():
    ch = SimChannel(cfg("sim-block", 0.5, seed=5))
    fates = [ch.send_burst([b"a", b"b", b"c"]) for _ in range(20_000)]
    assert all(len(set(f)) == 1 for f in fates)
    lost = np.mean([not f[0] for f in fates])
    assert abs(lost - 0.125) < 4 * math.sqrt(0.125 * 0.875 / 20_000)


def test_scripted_drops_by_sequence_number():
    ch = SimChannel(cfg("scripted", drop_list={2, 4, 5}))
    assert [ch.send(b"%d" % i) for i in range(1, 7)] == [True, False, True, False, False, True]
    got = []
    while (d := ch.recv()) is not None:
        got.append(d)
    assert got == [b"1", b"3", b"6"]


def test_scripted_requires_list():
    with pytest.raises(ValueError):
        cfg("scripted")


def test_extreme_loss_rates():
    assert all(SimChannel(cfg("sim-packet", 0.0)).send(b"x") for _ in range(100))
    assert not any(SimChannel(cfg("sim-packet", 1.0)).send(b"x") for _ in range(100))
    with pytest.raises(ValueError):
        cfg("sim-packet", 1.2)


def test_delay_and_fifo_order():
    ch = SimChannel(cfg("sim-packet", delay_us=500))
    send(ch, b"a", now=1.0)
    send(ch, b"b", now=1.0001)
    assert recv(ch, now=1.0004) is None
    assert ch.recv_timed(1.0005) == (1.0005, b"a")
    assert recv(ch, now=2.0) == b"b"


def test_closed_channel():
    ch = SimChannel(cfg("sim-packet"))
    ch.send(b"last")
    ch.close()
    assert ch.recv() == b"last"
    with pytest.raises(ChannelClosed):
        ch.recv()
    with pytest.raises(ChannelClosed):
        ch.send(b"x")


def test_udp_mode_is_not_simulated():
    with pytest.raises(ValueError):
        SimChannel(cfg("udp"))


def test_drop_script_file(tmp_path):
    p = tmp_path / "drops.txt"
    p.write_text("# lose these\n1, 3\n7 9  # trailing\n")
    assert read_drop_script(p) == {1, 3, 7, 9}


def test_udp_loopback_with_emulated_drops():
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(2.0)
    tx = UdpTransport(rx.getsockname(), bind=("127.0.0.1", 0),
                      drops=PacketDrops(0.5, key=1))
    try:
        tx.send_burst([b"%d" % i for i in range(40)])
        delivered = 40 - tx.dropped
        got = [rx.recvfrom(100)[0] for _ in range(delivered)]
        assert len(got) == delivered and 0 < delivered < 40
        rx.sendto(b"pong", tx.sock.getsockname())
        assert tx.recv(1.0) == b"pong"
        assert tx.recv(0.01) is None
    finally:
        tx.close()
        rx.close()
