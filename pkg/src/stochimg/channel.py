"""Datagram channels: simulated lossy pipes and a UDP transport.

Loss models
-----------
``sim-packet``  every datagram is dropped independently with probability L.
``sim-block``   a burst of K datagrams (one block attempt) is delivered or
                dropped as a unit; it is lost with probability L**K.
``scripted``    the listed datagram sequence numbers (1-based) are dropped.
``udp``         real sockets; no artificial loss unless a drop model is attached.

Drop decisions come from the counter-based stream ``derive_key(seed,
"channel")``: datagram ``n`` (sim-packet) or burst ``n`` (sim-block) uses
draw ``n``, so a seed and a send sequence fully determine what is lost.
"""

from __future__ import annotations

import enum
import math
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .rng import Stream, derive_key


class ChannelMode(str, enum.Enum):
    UDP = "udp"
    SIM_PACKET = "sim-packet"
    SIM_BLOCK = "sim-block"
    SCRIPTED = "scripted"


class ChannelClosed(Exception):
    """End of stream: the channel is closed and fully drained."""


@dataclass(frozen=True)
class ChannelConfig:
    mode: ChannelMode = ChannelMode.SIM_PACKET
    loss_rate: float = 0.0
    seed: int = 0
    delay_us: int = 0
    drop_list: Optional[frozenset] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ChannelMode(self.mode))
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss rate must lie in [0, 1], got {self.loss_rate}")
        if self.delay_us < 0:
            raise ValueError("delay must be non-negative")
        if self.drop_list is not None:
            object.__setattr__(self, "drop_list", frozenset(int(x) for x in self.drop_list))
        elif self.mode is ChannelMode.SCRIPTED:
            raise ValueError("scripted channel requires a drop list")

    @property
    def stream_key(self) -> int:
        return derive_key(self.seed, "channel")


def read_drop_script(path) -> frozenset:
    """Drop list file: sequence numbers separated by whitespace or commas; '#' comments."""
    numbers = set()
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            for tok in line.replace(",", " ").split():
                numbers.add(int(tok))
    return frozenset(numbers)


# ---------------------------------------------------------------------------
# drop models


class NoDrops:
    def decide(self, burst: int) -> list[bool]:
        return [True] * burst


class PacketDrops:
    def __init__(self, loss_rate: float, key: int):
        self.loss_rate = loss_rate
        self.stream = Stream(key)

    def decide(self, burst: int) -> list[bool]:
        return [self.stream.next_uniform() >= self.loss_rate for _ in range(burst)]


class BlockDrops:
    def __init__(self, loss_rate: float, key: int):
        self.loss_rate = loss_rate
        self.stream = Stream(key)

    def decide(self, burst: int) -> list[bool]:
        ok = self.stream.next_uniform() >= self.loss_rate ** burst
        return [ok] * burst


class ScriptedDrops:
    def __init__(self, drop_list):
        self.drop_list = frozenset(drop_list)
        self.sequence = 0

    def decide(self, burst: int) -> list[bool]:
        out = []
        for _ in range(burst):
            self.sequence += 1
            out.append(self.sequence not in self.drop_list)
        return out


def make_drop_model(config: ChannelConfig):
    if config.mode is ChannelMode.SCRIPTED:
        return ScriptedDrops(config.drop_list)
    if config.mode is ChannelMode.SIM_BLOCK:
        return BlockDrops(config.loss_rate, config.stream_key)
    return PacketDrops(config.loss_rate, config.stream_key)


# ---------------------------------------------------------------------------
# simulated pipe


class SimChannel:
    """One-way in-process datagram pipe with loss and a fixed delay.

    Delivery is FIFO without duplication or corruption. ``recv`` follows a
    polling contract: it returns ``None`` when nothing is deliverable at
    ``now`` and raises :class:`ChannelClosed` once closed and drained.
    Both ends may live on different threads.
    """

    def __init__(self, config: ChannelConfig):
        if config.mode is ChannelMode.UDP:
            raise ValueError("SimChannel cannot run in udp mode")
        self.config = config
        self.delay = config.delay_us * 1e-6
        self._drops = make_drop_model(config)
        self._queue: deque = deque()
        self._lock = threading.Lock()
        self._closed = False
        self.sent = 0
        self.dropped = 0

    def send(self, data: bytes, now: float = 0.0) -> bool:
        return self.send_burst([data], now)[0]

    def send_burst(self, datagrams: Sequence[bytes], now: float = 0.0) -> list[bool]:
        """Send one block attempt; sim-block mode decides its fate as a whole."""
        with self._lock:
            if self._closed:
                raise ChannelClosed("send on closed channel")
            fate = self._drops.decide(len(datagrams))
            for data, ok in zip(datagrams, fate):
                self.sent += 1
                if ok:
                    self._queue.append((now + self.delay, bytes(data)))
                else:
                    self.dropped += 1
            return fate

    def next_delivery(self) -> Optional[float]:
        with self._lock:
            return self._queue[0][0] if self._queue else None

    def recv_timed(self, now: float = math.inf) -> Optional[tuple[float, bytes]]:
        with self._lock:
            if self._queue and self._queue[0][0] <= now:
                return self._queue.popleft()
            if self._closed and not self._queue:
                raise ChannelClosed("channel closed")
            return None

    def recv(self, now: float = math.inf) -> Optional[bytes]:
        item = self.recv_timed(now)
        return None if item is None else item[1]

    def close(self) -> None:
        with self._lock:
            self._closed = True


def send(channel: SimChannel, data: bytes, now: float = 0.0) -> bool:
    return channel.send(data, now)


def recv(channel: SimChannel, now: float = math.inf) -> Optional[bytes]:
    return channel.recv(now)


# ---------------------------------------------------------------------------
# UDP


class UdpTransport:
    """Sender-side UDP endpoint with an optional emulated drop model.

    Provides the transport surface the protocol engine drives:
    ``send``, ``send_burst``, ``recv(timeout)``, ``now`` and ``sleep_until``.
    """

    def __init__(self, peer: tuple[str, int], bind: tuple[str, int] = ("0.0.0.0", 0),
                 drops=None):
        self.peer = peer
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self._drops = drops if drops is not None else NoDrops()
        self.sent = 0
        self.dropped = 0

    def send(self, data: bytes) -> None:
        self.send_burst([data])

    def send_burst(self, datagrams: Sequence[bytes]) -> None:
        for data, ok in zip(datagrams, self._drops.decide(len(datagrams))):
            self.sent += 1
            if ok:
                self.sock.sendto(data, self.peer)
            else:
                self.dropped += 1

    def recv(self, timeout: float) -> Optional[bytes]:
        self.sock.settimeout(max(timeout, 1e-4))
        try:
            data, _ = self.sock.recvfrom(65535)
        except socket.timeout:
            return None
        return data

    @staticmethod
    def now() -> float:
        return time.monotonic()

    @staticmethod
    def sleep_until(t: float) -> None:
        sleep_until(t)

    def close(self) -> None:
        self.sock.close()


def sleep_until(t: float) -> None:
    """Sleep to an absolute monotonic instant; spins for the last millisecond."""
    while True:
        remaining = t - time.monotonic()
        if remaining <= 0:
            return
        if remaining > 2e-3:
            time.sleep(remaining - 1e-3)
        else:
            time.sleep(0)
