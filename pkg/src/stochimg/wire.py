"""Bit-exact packet codec.

Every packet starts with a 4-byte CoAP-style base header with no token and
no options::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |Ver| T |  TKL  |      Code     |          Message ID           |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+

Ver = 1, TKL = 0. Three bodies follow it directly (no 0xFF marker):

* CON 0.02 agreement request: 22 bytes of big-endian session parameters.
* ACK 2.04 agreement response: 2-byte session id.
* NON 0.03 block fragment: BT-header, then exactly ``packet_size`` bytes.

The BT-header packs ``block_id << fragment_bits | fragment_index`` into
``ceil((block_id_bits + fragment_bits) / 8)`` bytes, big-endian and
zero-padded on the left. See docs/wire-format.md for the full layouts.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

VERSION = 1
BASE_HEADER_SIZE = 4

CODE_POST = 0x02     # 0.02
CODE_PUT = 0x03      # 0.03
CODE_CHANGED = 0x44  # 2.04

_REQUEST = struct.Struct(">HBIHHBHHHI")
_ACK = struct.Struct(">H")


class MsgType(enum.IntEnum):
    CON = 0
    NON = 1
    ACK = 2


class WireError(ValueError):
    pass


class ShortHeader(WireError):
    pass


class BadVersion(WireError):
    pass


class UnknownCode(WireError):
    pass


class LengthMismatch(WireError):
    pass


class FieldOverflow(WireError):
    pass


class MalformedPacket(WireError):
    pass


class MissingSession(WireError):
    pass


def block_id_bits(block_count: int) -> int:
    """ceil(log2 |I|), with a floor of one bit."""
    if block_count < 1:
        raise ValueError("block count must be >= 1")
    return max(1, (block_count - 1).bit_length())


def fragment_bits(fragments: int) -> int:
    """ceil(log2 K); zero when blocks are not fragmented."""
    if fragments < 1:
        raise ValueError("fragment count must be >= 1")
    return (fragments - 1).bit_length()


def bt_header_size(id_bits: int, frag_bits: int) -> int:
    return (id_bits + frag_bits + 7) // 8


@dataclass(frozen=True)
class BaseHeader:
    msg_type: MsgType
    code: int
    message_id: int
    version: int = VERSION
    token_length: int = 0


@dataclass(frozen=True)
class BtHeader:
    block_id: int
    block_id_bits: int
    fragment_index: int = 0
    fragment_bits: int = 0

    @property
    def size(self) -> int:
        return bt_header_size(self.block_id_bits, self.fragment_bits)


@dataclass(frozen=True)
class WireSession:
    """What a receiver needs to parse block fragments."""

    block_id_bits: int
    fragment_bits: int
    packet_size: int

    @property
    def data_packet_size(self) -> int:
        return BASE_HEADER_SIZE + bt_header_size(self.block_id_bits, self.fragment_bits) \
            + self.packet_size


@dataclass(frozen=True)
class AgreementRequest:
    session_id: int
    block_id_bits: int
    total_transmissions: int
    width: int
    height: int
    channels: int
    block_width: int
    block_height: int
    packet_size: int
    send_interval_us: int

    @property
    def block_bytes(self) -> int:
        return self.block_width * self.block_height * self.channels

    @property
    def block_count(self) -> int:
        return (self.width // self.block_width) * (self.height // self.block_height)

    @property
    def fragments(self) -> int:
        return self.block_bytes // self.packet_size

    @property
    def session(self) -> WireSession:
        return WireSession(self.block_id_bits, fragment_bits(self.fragments), self.packet_size)

    def validate(self) -> None:
        for name in ("total_transmissions", "width", "height", "block_width",
                     "block_height", "packet_size", "send_interval_us", "block_id_bits"):
            if getattr(self, name) < 1:
                raise MalformedPacket(f"agreement field {name} must be positive")
        if self.channels not in (1, 3):
            raise MalformedPacket(f"agreement channels must be 1 or 3, got {self.channels}")
        if self.width % self.block_width or self.height % self.block_height:
            raise MalformedPacket("agreement geometry: image not divisible into blocks")
        if self.block_bytes % self.packet_size:
            raise MalformedPacket("agreement geometry: block size not a multiple of packet size")
        if self.block_id_bits != block_id_bits(self.block_count):
            raise MalformedPacket(
                f"agreement block_id_bits {self.block_id_bits} inconsistent with "
                f"{self.block_count} blocks")


@dataclass(frozen=True)
class AgreementAck:
    session_id: int


@dataclass(frozen=True)
class BlockFragment:
    bt: BtHeader
    payload: bytes


Body = Union[AgreementRequest, AgreementAck, BlockFragment]


@dataclass(frozen=True)
class Packet:
    header: BaseHeader
    body: Body


# ---------------------------------------------------------------------------
# constructors


def request_packet(message_id: int, request: AgreementRequest) -> Packet:
    return Packet(BaseHeader(MsgType.CON, CODE_POST, message_id), request)


def ack_packet(message_id: int, session_id: int) -> Packet:
    return Packet(BaseHeader(MsgType.ACK, CODE_CHANGED, message_id), AgreementAck(session_id))


def fragment_packet(message_id: int, session: WireSession, block_id: int,
                    fragment_index: int, payload: bytes) -> Packet:
    bt = BtHeader(block_id, session.block_id_bits, fragment_index, session.fragment_bits)
    return Packet(BaseHeader(MsgType.NON, CODE_PUT, message_id), BlockFragment(bt, payload))


_EXPECTED = {
    CODE_POST: (MsgType.CON, AgreementRequest),
    CODE_CHANGED: (MsgType.ACK, AgreementAck),
    CODE_PUT: (MsgType.NON, BlockFragment),
}


# ---------------------------------------------------------------------------
# codec


def _check_uint(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise FieldOverflow(f"{name}={value} does not fit in {bits} bits")


def encode_bt(bt: BtHeader) -> bytes:
    _check_uint("block_id", bt.block_id, bt.block_id_bits)
    if bt.fragment_bits == 0 and bt.fragment_index != 0:
        raise FieldOverflow(f"fragment_index={bt.fragment_index} with no fragment bits")
    _check_uint("fragment_index", bt.fragment_index, bt.fragment_bits)
    value = (bt.block_id << bt.fragment_bits) | bt.fragment_index
    return value.to_bytes(bt.size, "big")


def encode(packet: Packet) -> bytes:
    h = packet.header
    if h.version != VERSION:
        raise BadVersion(f"version must be {VERSION}")
    if h.token_length != 0:
        raise MalformedPacket("token length must be 0")
    _check_uint("message_id", h.message_id, 16)
    _check_uint("code", h.code, 8)
    expected = _EXPECTED.get(h.code)
    if expected is None:
        raise UnknownCode(f"unknown code 0x{h.code:02x}")
    mtype, body_cls = expected
    if h.msg_type != mtype or not isinstance(packet.body, body_cls):
        raise MalformedPacket(f"code 0x{h.code:02x} requires {mtype.name} {body_cls.__name__}")

    head = bytes([(VERSION << 6) | (int(h.msg_type) << 4), h.code]) + h.message_id.to_bytes(2, "big")
    body = packet.body
    if isinstance(body, BlockFragment):
        return head + encode_bt(body.bt) + body.payload
    if isinstance(body, AgreementAck):
        _check_uint("session_id", body.session_id, 16)
        return head + _ACK.pack(body.session_id)
    body.validate()
    for name, bits in (("session_id", 16), ("block_id_bits", 8), ("total_transmissions", 32),
                       ("width", 16), ("height", 16), ("channels", 8), ("block_width", 16),
                       ("block_height", 16), ("packet_size", 16), ("send_interval_us", 32)):
        _check_uint(name, getattr(body, name), bits)
    return head + _REQUEST.pack(
        body.session_id, body.block_id_bits, body.total_transmissions, body.width,
        body.height, body.channels, body.block_width, body.block_height,
        body.packet_size, body.send_interval_us)


def decode_header(data: bytes) -> BaseHeader:
    if len(data) < BASE_HEADER_SIZE:
        raise ShortHeader(f"short header: {len(data)} bytes")
    b0 = data[0]
    version = b0 >> 6
    if version != VERSION:
        raise BadVersion(f"bad version {version}")
    tkl = b0 & 0x0F
    if tkl != 0:
        raise MalformedPacket(f"token length {tkl} not supported")
    t = (b0 >> 4) & 0x03
    if t not in MsgType._value2member_map_:
        raise MalformedPacket(f"unsupported message type {t}")
    code = data[1]
    if code not in _EXPECTED:
        raise UnknownCode(f"unknown code 0x{code:02x}")
    return BaseHeader(MsgType(t), code, int.from_bytes(data[2:4], "big"))


def decode(data: bytes, session: Optional[WireSession] = None) -> Packet:
    """Parse one datagram. Block fragments need the agreed ``session``."""
    data = bytes(data)
    header = decode_header(data)
    mtype, body_cls = _EXPECTED[header.code]
    if header.msg_type != mtype:
        raise MalformedPacket(
            f"code 0x{header.code:02x} carried by {header.msg_type.name}, expected {mtype.name}")
    rest = data[BASE_HEADER_SIZE:]
    if body_cls is AgreementAck:
        if len(rest) != _ACK.size:
            raise LengthMismatch(f"length mismatch: ack body is {len(rest)} bytes")
        return Packet(header, AgreementAck(*_ACK.unpack(rest)))
    if body_cls is AgreementRequest:
        if len(rest) != _REQUEST.size:
            raise LengthMismatch(f"length mismatch: request body is {len(rest)} bytes")
        request = AgreementRequest(*_REQUEST.unpack(rest))
        request.validate()
        return Packet(header, request)
    if session is None:
        raise MissingSession("block fragment received before agreement")
    bt_len = bt_header_size(session.block_id_bits, session.fragment_bits)
    if len(rest) != bt_len + session.packet_size:
        raise LengthMismatch(
            f"length mismatch: fragment body is {len(rest)} bytes, expected "
            f"{bt_len + session.packet_size}")
    value = int.from_bytes(rest[:bt_len], "big")
    if value >> (session.block_id_bits + session.fragment_bits):
        raise FieldOverflow("BT-header padding bits are not zero")
    frag_mask = (1 << session.fragment_bits) - 1
    bt = BtHeader(value >> session.fragment_bits, session.block_id_bits,
                  value & frag_mask, session.fragment_bits)
    return Packet(header, BlockFragment(bt, rest[bt_len:]))
