"""Sender and receiver state machines.

A session has two phases. In the agreement phase the sender repeats a
confirmable request (exponential backoff) until the receiver acknowledges
it. In the block phase the sender draws N block ids i.i.d. from the value
map and sends each drawn block as K back-to-back non-confirmable fragments
at a fixed pace. Nothing in the block phase is ever retransmitted, and the
receiver never answers during it.

The engine talks to a *transport* with this duck-typed surface::

    send(datagram)            one datagram (agreement traffic)
    send_burst(datagrams)     one block attempt (K fragments)
    recv(timeout) -> bytes | None
    now() -> float            seconds
    sleep_until(t)

:class:`channel.UdpTransport` implements it over sockets and
:class:`SimulatedSession` over in-process channels on a virtual clock.
"""

from __future__ import annotations

import enum
import math
import socket
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelConfig, ChannelMode, SimChannel
from .image import BlockGrid, BlockPayload, PartialImage, reassemble
from .model import TransmissionPlan
from .rng import derive_key
from .sampler import AliasSampler
from .wire import (AgreementAck, AgreementRequest, BlockFragment, WireError, ack_packet,
                   block_id_bits, decode, encode, fragment_packet, request_packet)

ACK_TIMEOUT = 2.0
MAX_RETRANSMIT = 4
DEFAULT_INTERVAL_US = 1000
DEFAULT_GUARD_INTERVALS = 50


class ProtocolError(RuntimeError):
    pass


class AgreementFailed(ProtocolError):
    pass


class TransportFailure(ProtocolError):
    def __init__(self, log, cause):
        super().__init__(f"transport failed after {len(log)} block transmissions: {cause}")
        self.log = log


class SenderPhase(enum.Enum):
    AGREEING = "agreeing"
    TRANSMITTING = "transmitting"
    DONE = "done"


class ReceiverPhase(enum.Enum):
    AWAITING_AGREEMENT = "awaiting-agreement"
    RECEIVING = "receiving"
    FINALIZED = "finalized"


def sampler_key(seed: int) -> int:
    return derive_key(seed, "sampler")


def forward_seed(seed: int) -> int:
    return derive_key(seed, "forward")


def reverse_seed(seed: int) -> int:
    return derive_key(seed, "reverse")


def session_id_for(seed: int) -> int:
    return derive_key(seed, "session") & 0xFFFF


@dataclass(frozen=True)
class SendRecord:
    sequence: int
    block_id: int
    timestamp: float


class Sender:
    def __init__(self, plan: TransmissionPlan, grid: BlockGrid,
                 payloads: Sequence[BlockPayload], *, seed: int,
                 send_interval_us: int = DEFAULT_INTERVAL_US,
                 session_id: Optional[int] = None,
                 ack_timeout: float = ACK_TIMEOUT, max_retransmit: int = MAX_RETRANSMIT):
        if plan.block_count != grid.count:
            raise ProtocolError(f"plan covers {plan.block_count} blocks, grid has {grid.count}")
        if plan.sizing.block_size != grid.block_bytes:
            raise ProtocolError("plan block size does not match the grid")
        if send_interval_us < 1:
            raise ProtocolError("send interval must be at least 1 us")
        by_id = {p.block_id: p.data for p in payloads}
        if sorted(by_id) != list(range(grid.count)):
            raise ProtocolError("payloads must cover every block exactly once")
        self.plan = plan
        self.grid = grid
        self.rng_seed = seed
        self.send_interval_us = int(send_interval_us)
        self.session_id = session_id_for(seed) if session_id is None else session_id
        self.ack_timeout = ack_timeout
        self.max_retransmit = max_retransmit
        self.phase = SenderPhase.AGREEING
        self.sent_count = 0
        self.requests_sent = 0
        self.ignored_replies = 0
        self.log: list[SendRecord] = []
        self.block_phase_started: Optional[float] = None
        self.block_phase_ended: Optional[float] = None
        self.sampler = AliasSampler(plan.probabilities, sampler_key(seed))
        self._message_id = self.session_id
        self.request = AgreementRequest(
            session_id=self.session_id,
            block_id_bits=block_id_bits(grid.count),
            total_transmissions=plan.total_transmissions,
            width=grid.width, height=grid.height, channels=grid.channels,
            block_width=grid.block_width, block_height=grid.block_height,
            packet_size=plan.channel.packet_size,
            send_interval_us=self.send_interval_us,
        )
        size = plan.channel.packet_size
        k = plan.fragments_per_block
        self._fragments = [[by_id[b][f * size:(f + 1) * size] for f in range(k)]
                           for b in range(grid.count)]

    def next_message_id(self) -> int:
        mid = self._message_id
        self._message_id = (mid + 1) & 0xFFFF
        return mid

    @property
    def duration(self) -> Optional[float]:
        if self.block_phase_started is None or self.block_phase_ended is None:
            return None
        return self.block_phase_ended - self.block_phase_started

    def encode_block(self, block_id: int) -> list[bytes]:
        session = self.request.session
        return [encode(fragment_packet(self.next_message_id(), session, block_id, f, chunk))
                for f, chunk in enumerate(self._fragments[block_id])]


def run_agreement(sender: Sender, transport) -> AgreementAck:
    """Confirmable parameter handshake; raises AgreementFailed when retries run out."""
    if sender.phase is not SenderPhase.AGREEING:
        raise ProtocolError(f"agreement not allowed in phase {sender.phase.value}")
    datagram = encode(request_packet(sender.next_message_id(), sender.request))
    timeout = sender.ack_timeout
    for _ in range(sender.max_retransmit + 1):
        transport.send(datagram)
        sender.requests_sent += 1
        deadline = transport.now() + timeout
        while True:
            remaining = deadline - transport.now()
            if remaining <= 0:
                break
            data = transport.recv(remaining)
            if data is None:
                continue
            try:
                body = decode(data).body
            except WireError:
                sender.ignored_replies += 1
                continue
            if isinstance(body, AgreementAck) and body.session_id == sender.session_id:
                sender.phase = SenderPhase.TRANSMITTING
                return body
            sender.ignored_replies += 1
        timeout *= 2
    raise AgreementFailed(
        f"agreement failed: no ACK after {sender.requests_sent} requests")


def run_block_phase(sender: Sender, transport) -> list[SendRecord]:
    """Send exactly N paced block attempts; returns the send log."""
    if sender.phase is not SenderPhase.TRANSMITTING:
        raise ProtocolError(f"block phase not allowed in phase {sender.phase.value}")
    interval = sender.send_interval_us * 1e-6
    n = sender.plan.total_transmissions
    start = transport.now()
    sender.block_phase_started = start
    try:
        while sender.sent_count < n:
            seq = sender.sent_count
            transport.sleep_until(start + seq * interval)
            block = sender.sampler.draw()
            datagrams = sender.encode_block(block)
            t = transport.now()
            transport.send_burst(datagrams)
            sender.log.append(SendRecord(seq, block, t - start))
            sender.sent_count += 1
    except OSError as exc:
        raise TransportFailure(list(sender.log), exc) from exc
    sender.block_phase_ended = transport.now()
    sender.phase = SenderPhase.DONE
    return list(sender.log)


# ---------------------------------------------------------------------------
# receiver


@dataclass(frozen=True)
class ReceptionReport:
    block_count: int
    received: tuple
    data_packets: int
    duplicate_fragments: int
    undecodable: int
    late_packets: int
    agreement_requests: int
    deadline: float
    finalized_at: float

    @property
    def unique_blocks(self) -> int:
        return sum(self.received)

    @property
    def received_ids(self) -> list[int]:
        return [i for i, ok in enumerate(self.received) if ok]


class Receiver:
    """Collects fragments for one session and rebuilds the partial image.

    All state changes happen under an internal lock, so packet ingestion and
    deadline handling may run on different threads.
    """

    def __init__(self, guard_intervals: int = DEFAULT_GUARD_INTERVALS, fill: int = 0):
        self.guard_intervals = guard_intervals
        self.fill = fill
        self.phase = ReceiverPhase.AWAITING_AGREEMENT
        self.request: Optional[AgreementRequest] = None
        self.grid: Optional[BlockGrid] = None
        self.agreed_at: Optional[float] = None
        self.deadline: Optional[float] = None
        self.data_packets = 0
        self.duplicate_fragments = 0
        self.undecodable = 0
        self.late_packets = 0
        self.agreement_requests = 0
        self.foreign_requests = 0
        self._session = None
        self._k = 1
        self._full_mask = 1
        self._buffers: dict[int, bytearray] = {}
        self._masks: dict[int, int] = {}
        self._complete: set[int] = set()
        self._result: Optional[tuple[PartialImage, ReceptionReport]] = None
        self._lock = threading.Lock()

    @property
    def complete(self) -> bool:
        with self._lock:
            return self.grid is not None and len(self._complete) == self.grid.count

    def received_blocks(self) -> frozenset:
        with self._lock:
            return frozenset(self._complete)

    def fragment_mask(self, block_id: int) -> int:
        with self._lock:
            return self._masks.get(block_id, 0)

    def ingest(self, data: bytes, now: float) -> list[bytes]:
        """Process one datagram; returns datagrams to send back (agreement ACKs)."""
        with self._lock:
            if self.phase is ReceiverPhase.FINALIZED:
                self.late_packets += 1
                return []
            try:
                packet = decode(data, self._session)
            except WireError:
                self.undecodable += 1
                return []
            body = packet.body
            if isinstance(body, AgreementRequest):
                return self._on_request(packet.header.message_id, body, now)
            if isinstance(body, BlockFragment):
                self._on_fragment(body, now)
            else:
                self.undecodable += 1
            return []

    def _on_request(self, message_id: int, req: AgreementRequest, now: float) -> list[bytes]:
        if self.phase is ReceiverPhase.AWAITING_AGREEMENT:
            self.request = req
            self.grid = BlockGrid(req.width, req.height, req.channels,
                                  req.block_width, req.block_height)
            self._session = req.session
            self._k = req.fragments
            self._full_mask = (1 << self._k) - 1
            self.agreed_at = now
            interval = req.send_interval_us * 1e-6
            self.deadline = now + (req.total_transmissions + self.guard_intervals) * interval
            self.phase = ReceiverPhase.RECEIVING
        elif req.session_id != self.request.session_id:
            self.foreign_requests += 1
            return []
        elif self.data_packets == 0:
            # the sender has not started yet, so its clock starts at its last request
            self.agreed_at = now
            interval = req.send_interval_us * 1e-6
            self.deadline = now + (req.total_transmissions + self.guard_intervals) * interval
        # repeated requests mean our ACK was lost; answer each one
        self.agreement_requests += 1
        return [encode(ack_packet(message_id, req.session_id))]

    def _on_fragment(self, frag: BlockFragment, now: float) -> None:
        if now > self.deadline:
            self.late_packets += 1
            return
        b, f = frag.bt.block_id, frag.bt.fragment_index
        if b >= self.grid.count or f >= self._k:
            self.undecodable += 1
            return
        self.data_packets += 1
        mask = self._masks.get(b, 0)
        bit = 1 << f
        if mask & bit:
            self.duplicate_fragments += 1
            return
        buf = self._buffers.get(b)
        if buf is None:
            buf = self._buffers[b] = bytearray(self.grid.block_bytes)
        size = self.request.packet_size
        buf[f * size:(f + 1) * size] = frag.payload
        mask |= bit
        self._masks[b] = mask
        if mask == self._full_mask:
            self._complete.add(b)

    def can_finalize(self, now: float) -> bool:
        with self._lock:
            return self._can_finalize(now)

    def _can_finalize(self, now: float) -> bool:
        if self.phase is ReceiverPhase.FINALIZED:
            return True
        if self.phase is not ReceiverPhase.RECEIVING:
            return False
        return now >= self.deadline or len(self._complete) == self.grid.count

    def finalize(self, now: float) -> tuple[PartialImage, ReceptionReport]:
        with self._lock:
            if self._result is not None:
                return self._result
            if self.phase is ReceiverPhase.AWAITING_AGREEMENT:
                raise ProtocolError("finalize before agreement")
            if not self._can_finalize(now):
                raise ProtocolError(
                    f"finalize before deadline ({now:.6f} < {self.deadline:.6f}) "
                    f"with {len(self._complete)}/{self.grid.count} blocks")
            payloads = [BlockPayload(b, bytes(self._buffers[b])) for b in sorted(self._complete)]
            partial = reassemble(self.grid, payloads, self.fill)
            report = ReceptionReport(
                block_count=self.grid.count,
                received=tuple(i in self._complete for i in range(self.grid.count)),
                data_packets=self.data_packets,
                duplicate_fragments=self.duplicate_fragments,
                undecodable=self.undecodable,
                late_packets=self.late_packets,
                agreement_requests=self.agreement_requests,
                deadline=self.deadline,
                finalized_at=now,
            )
            self.phase = ReceiverPhase.FINALIZED
            self._result = (partial, report)
            return self._result


def ingest_packet(receiver: Receiver, data: bytes, now: float) -> list[bytes]:
    return receiver.ingest(data, now)


def finalize(receiver: Receiver, now: float) -> tuple[PartialImage, ReceptionReport]:
    return receiver.finalize(now)


# ---------------------------------------------------------------------------
# in-process session on a virtual clock


class SimulatedSession:
    """Connects a receiver to the sender-side transport surface in virtual time.

    Datagrams from ``send`` travel over the control channel and those from
    ``send_burst`` over the data channel; both default to the same forward
    channel so that agreement traffic shares the data path's losses. ACKs
    come back over the reverse channel. Time only moves when the sender
    sleeps or waits, and every delivery is processed in timestamp order.
    """

    def __init__(self, receiver: Receiver, forward: ChannelConfig,
                 reverse: Optional[ChannelConfig] = None,
                 control: Optional[ChannelConfig] = None, start: float = 0.0):
        self.receiver = receiver
        self.data = SimChannel(forward)
        self.control = self.data if control is None else SimChannel(control)
        self.reverse = SimChannel(reverse if reverse is not None
                                  else ChannelConfig(ChannelMode.SIM_PACKET, 0.0))
        self._now = start

    def now(self) -> float:
        return self._now

    def send(self, data: bytes) -> None:
        self.control.send(data, self._now)

    def send_burst(self, datagrams: Sequence[bytes]) -> None:
        self.data.send_burst(datagrams, self._now)

    def recv(self, timeout: float) -> Optional[bytes]:
        return self._advance(self._now + max(timeout, 0.0), want_reply=True)

    def sleep_until(self, t: float) -> None:
        self._advance(max(t, self._now), want_reply=False)

    def _forward_channels(self):
        return (self.control,) if self.control is self.data else (self.control, self.data)

    def _advance(self, until: float, want_reply: bool) -> Optional[bytes]:
        while True:
            best, best_t = None, math.inf
            for ch in self._forward_channels():
                t = ch.next_delivery()
                if t is not None and t < best_t:
                    best, best_t = ch, t
            tr = self.reverse.next_delivery() if want_reply else None
            if tr is not None and tr <= until and tr < best_t:
                self._now = max(self._now, tr)
                return self.reverse.recv(tr)
            if best is None or best_t > until:
                self._now = max(self._now, until)
                return None
            self._now = max(self._now, best_t)
            data = best.recv(best_t)
            for reply in self.receiver.ingest(data, self._now):
                self.reverse.send(reply, self._now)

    def finish(self) -> tuple[PartialImage, ReceptionReport]:
        """Deliver everything in flight, then finalize at completion or at the deadline."""
        rx = self.receiver
        if rx.phase is ReceiverPhase.AWAITING_AGREEMENT:
            raise ProtocolError("session never reached agreement")
        self._advance(max(self._now, _last_delivery(self._forward_channels(), self._now)),
                      want_reply=False)
        if not rx.can_finalize(self._now):
            self._advance(rx.deadline, want_reply=False)
        return rx.finalize(self._now)


def _last_delivery(channels, default: float) -> float:
    last = default
    for ch in channels:
        with ch._lock:
            if ch._queue:
                last = max(last, ch._queue[-1][0])
    return last


@dataclass
class SessionResult:
    partial: PartialImage
    report: ReceptionReport
    send_log: list
    sender: Sender
    data_units_before_block_phase: int = 0
    channel_stats: dict = field(default_factory=dict)


def run_simulated_session(plan: TransmissionPlan, grid: BlockGrid,
                          payloads: Sequence[BlockPayload], *, seed: int,
                          mode: ChannelMode = ChannelMode.SIM_PACKET,
                          loss_rate: Optional[float] = None,
                          send_interval_us: int = DEFAULT_INTERVAL_US,
                          guard_intervals: int = DEFAULT_GUARD_INTERVALS,
                          delay_us: int = 0, lossy_agreement: bool = True,
                          drop_list=None, fill: int = 0) -> SessionResult:
    """Run agreement, block phase and finalization over simulated channels.

    The forward data channel is seeded from ``forward_seed(seed)``. With
    ``lossy_agreement`` the handshake crosses the same lossy channels as the
    data (and the reverse path loses ACKs at the same rate); otherwise it
    uses a separate lossless control path. Scripted drop lists always count
    block-phase datagrams only, so agreement never touches the script.
    """
    mode = ChannelMode(mode)
    loss = plan.channel.loss_rate if loss_rate is None else loss_rate
    if mode is ChannelMode.SCRIPTED:
        loss = 0.0
    forward = ChannelConfig(mode, loss, forward_seed(seed), delay_us, drop_list)
    if lossy_agreement and mode is not ChannelMode.SCRIPTED:
        reverse = ChannelConfig(ChannelMode.SIM_PACKET, loss, reverse_seed(seed), delay_us)
        control = None
    else:
        reverse = ChannelConfig(ChannelMode.SIM_PACKET, 0.0, reverse_seed(seed), delay_us)
        control = ChannelConfig(ChannelMode.SIM_PACKET, 0.0, derive_key(seed, "control"),
                                delay_us)
    receiver = Receiver(guard_intervals=guard_intervals, fill=fill)
    link = SimulatedSession(receiver, forward, reverse, control)
    sender = Sender(plan, grid, payloads, seed=seed, send_interval_us=send_interval_us)
    run_agreement(sender, link)
    units = _units_consumed(link.data)
    log = run_block_phase(sender, link)
    partial, report = link.finish()
    stats = {"data_sent": link.data.sent, "data_dropped": link.data.dropped,
             "reverse_sent": link.reverse.sent, "reverse_dropped": link.reverse.dropped}
    return SessionResult(partial, report, log, sender, units, stats)


def _units_consumed(channel: SimChannel) -> int:
    """Number of loss-stream draws a channel has used so far."""
    drops = channel._drops
    if hasattr(drops, "stream"):
        return drops.stream.counter
    return getattr(drops, "sequence", 0)


# ---------------------------------------------------------------------------
# UDP receiver loop


def serve_udp(receiver: Receiver, sock: socket.socket, *, agreement_wait: float = 30.0,
              clock=None, poll: float = 0.05) -> tuple[PartialImage, ReceptionReport]:
    """Drive a receiver from a bound UDP socket until it can finalize."""
    import time

    clock = clock or time.monotonic
    give_up = clock() + agreement_wait
    while True:
        now = clock()
        if receiver.phase is ReceiverPhase.RECEIVING and receiver.can_finalize(now):
            return receiver.finalize(now)
        if receiver.phase is ReceiverPhase.AWAITING_AGREEMENT and now >= give_up:
            raise AgreementFailed(f"no agreement request within {agreement_wait:.1f} s")
        limit = give_up if receiver.deadline is None else receiver.deadline
        sock.settimeout(max(1e-4, min(poll, limit - now)))
        try:
            data, addr = sock.recvfrom(65535)
        except socket.timeout:
            continue
        for reply in receiver.ingest(data, clock()):
            sock.sendto(reply, addr)


def trial_stream_keys(seed: int) -> tuple[int, int]:
    """(sampler key, forward loss key) that a simulated session with ``seed`` uses."""
    return sampler_key(seed), ChannelConfig(seed=forward_seed(seed)).stream_key


def send_log_array(log: Sequence[SendRecord]) -> np.ndarray:
    return np.array([(r.sequence, r.block_id) for r in log], dtype=np.int64).reshape(-1, 2)
