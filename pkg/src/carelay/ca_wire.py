"""Channel Access datagram codec for the UDP name-resolution phase.

Covers just enough of the public CA wire format to generate and parse
search request/response traffic on port 5064: the 16-byte big-endian
message header, the version message, and the search pair. A small framed
value-exchange message set stands in for the CA data circuit so that
caget/caput-style flows can complete end to end without TCP.

Header layout (all big-endian):

    offset  size  field
    0       2     command
    2       2     payload_size   (multiple of 8)
    6       2     data_type
    6       2     data_count
    8       4     param1
    12      4     param2

Captures from real CA clients use the same layout, so traffic recorded on
port 5064 can be fed through decode_datagram for manual inspection.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .packet import int_to_ip, ip_to_int

CA_HEADER_LEN = 16
CA_SERVER_PORT = 5064
DEFAULT_MINOR_VERSION = 13
MAX_PV_NAME = 60

CMD_VERSION = 0
CMD_SEARCH = 6

USE_PACKET_SOURCE = 0xFFFFFFFF

_HDR = struct.Struct(">HHHHII")


class CaWireError(Exception):
    """Base class for CA codec failures."""


class Truncated(CaWireError):
    pass


class MisalignedPayload(CaWireError):
    pass


class NameTooLong(CaWireError):
    pass


class UnknownKind(CaWireError):
    pass


class ReplyFlag(enum.IntEnum):
    DONT_REPLY = 5
    DO_REPLY = 10


class MessageKind(enum.Enum):
    VERSION = "version"
    SEARCH_REQUEST = "search_request"
    SEARCH_RESPONSE = "search_response"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class CaHeader:
    command: int
    payload_size: int
    data_type: int
    data_count: int
    param1: int
    param2: int

    def pack(self) -> bytes:
        return _HDR.pack(
            self.command,
            self.payload_size,
            self.data_type,
            self.data_count,
            self.param1,
            self.param2,
        )


@dataclass(frozen=True)
class CaMessage:
    header: CaHeader
    payload: bytes

    @property
    def kind(self) -> MessageKind:
        cmd = self.header.command
        if cmd == CMD_VERSION:
            return MessageKind.VERSION
        if cmd == CMD_SEARCH:
            # Requests carry the reply flag in data_type; responses carry the
            # server port there, which never collides with the two flag codes.
            if self.header.data_type in (ReplyFlag.DONT_REPLY, ReplyFlag.DO_REPLY):
                return MessageKind.SEARCH_REQUEST
            return MessageKind.SEARCH_RESPONSE
        return MessageKind.UNKNOWN


@dataclass(frozen=True)
class SearchRequest:
    pv_name: str
    search_id: int
    reply_flag: ReplyFlag = ReplyFlag.DONT_REPLY
    minor_version: int = DEFAULT_MINOR_VERSION


@dataclass(frozen=True)
class SearchResponse:
    server_port: int
    search_id: int
    server_minor_version: int = DEFAULT_MINOR_VERSION
    # None means "use the packet's source address" (param1 = 0xFFFFFFFF).
    server_address: str | None = None


def _padded_name(name: str) -> bytes:
    raw = name.encode("ascii") + b"\x00"
    pad = (-len(raw)) % 8
    return raw + b"\x00" * pad


def _version_message(minor_version: int) -> bytes:
    return CaHeader(CMD_VERSION, 0, 0, minor_version, 0, 0).pack()


def encode_search_datagram(req: SearchRequest) -> bytes:
    """Version message followed by one search request message.

    The search payload is the PV name, NUL-terminated and NUL-padded to a
    multiple of 8, so a name of up to 7 characters yields a 40-byte datagram
    and typical 10/11-character names yield 48 bytes.
    """
    if not req.pv_name or "\x00" in req.pv_name:
        raise ValueError("PV name must be nonempty and NUL-free")
    if len(req.pv_name) > MAX_PV_NAME:
        raise NameTooLong(f"{len(req.pv_name)} characters exceeds the {MAX_PV_NAME} limit")
    payload = _padded_name(req.pv_name)
    header = CaHeader(
        CMD_SEARCH,
        len(payload),
        int(req.reply_flag),
        req.minor_version,
        req.search_id,
        req.search_id,
    )
    return _version_message(req.minor_version) + header.pack() + payload


def encode_search_response_datagram(resp: SearchResponse) -> bytes:
    """Version message plus search response; always exactly 40 bytes."""
    param1 = USE_PACKET_SOURCE if resp.server_address is None else ip_to_int(resp.server_address)
    header = CaHeader(CMD_SEARCH, 8, resp.server_port, 0, param1, resp.search_id)
    payload = struct.pack(">H", resp.server_minor_version) + b"\x00" * 6
    return _version_message(resp.server_minor_version) + header.pack() + payload


def decode_datagram(data: bytes) -> list[CaMessage]:
    """Split a datagram into its consecutive header+payload messages."""
    messages = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < CA_HEADER_LEN:
            raise Truncated(f"{len(data) - offset} bytes left, header needs {CA_HEADER_LEN}")
        header = CaHeader(*_HDR.unpack_from(data, offset))
        if header.payload_size % 8:
            raise MisalignedPayload(f"payload_size {header.payload_size} not a multiple of 8")
        offset += CA_HEADER_LEN
        if len(data) - offset < header.payload_size:
            raise Truncated(
                f"payload_size {header.payload_size} but only {len(data) - offset} bytes remain"
            )
        messages.append(CaMessage(header, bytes(data[offset : offset + header.payload_size])))
        offset += header.payload_size
    return messages


def search_request_fields(msg: CaMessage) -> SearchRequest:
    if msg.kind is not MessageKind.SEARCH_REQUEST:
        raise ValueError(f"not a search request: {msg.header}")
    name = msg.payload.split(b"\x00", 1)[0].decode("ascii")
    return SearchRequest(
        pv_name=name,
        search_id=msg.header.param1,
        reply_flag=ReplyFlag(msg.header.data_type),
        minor_version=msg.header.data_count,
    )


def search_response_fields(msg: CaMessage) -> SearchResponse:
    if msg.kind is not MessageKind.SEARCH_RESPONSE:
        raise ValueError(f"not a search response: {msg.header}")
    param1 = msg.header.param1
    minor = struct.unpack_from(">H", msg.payload)[0] if len(msg.payload) >= 2 else 0
    return SearchResponse(
        server_port=msg.header.data_type,
        search_id=msg.header.param2,
        server_minor_version=minor,
        server_address=None if param1 == USE_PACKET_SOURCE else int_to_ip(param1),
    )


def find_search_requests(data: bytes) -> list[SearchRequest]:
    """All search requests in a datagram; convenience for endpoints."""
    return [
        search_request_fields(m)
        for m in decode_datagram(data)
        if m.kind is MessageKind.SEARCH_REQUEST
    ]


def find_search_response(data: bytes) -> SearchResponse | None:
    for m in decode_datagram(data):
        if m.kind is MessageKind.SEARCH_RESPONSE:
            return search_response_fields(m)
    return None


class ValueExchangeKind(enum.IntEnum):
    READ_REQUEST = 1
    READ_REPLY = 2
    WRITE_REQUEST = 3
    WRITE_ACK = 4


@dataclass(frozen=True)
class ValueExchange:
    """Simplified fetch/put message, carried over the reliable channel."""

    kind: ValueExchangeKind
    pv_name: str
    sequence: int
    value: float | None = None

    def __post_init__(self) -> None:
        carries_value = self.kind in (ValueExchangeKind.READ_REPLY, ValueExchangeKind.WRITE_REQUEST)
        if carries_value and self.value is None:
            raise ValueError(f"{self.kind.name} requires a value")
        if self.kind is ValueExchangeKind.WRITE_ACK and self.value is not None:
            raise ValueError("WRITE_ACK carries no value")


_VX_HDR = struct.Struct(">HHIB")


def encode_value_exchange(msg: ValueExchange) -> bytes:
    name = msg.pv_name.encode("ascii")
    has_value = msg.value is not None
    out = _VX_HDR.pack(int(msg.kind), len(name), msg.sequence, int(has_value)) + name
    if has_value:
        out += struct.pack(">d", msg.value)
    return out


def decode_value_exchange(data: bytes) -> ValueExchange:
    if len(data) < _VX_HDR.size:
        raise Truncated(f"{len(data)} bytes, framing header needs {_VX_HDR.size}")
    kind_code, name_len, sequence, has_value = _VX_HDR.unpack_from(data)
    try:
        kind = ValueExchangeKind(kind_code)
    except ValueError:
        raise UnknownKind(f"kind code {kind_code}") from None
    end = _VX_HDR.size + name_len
    value_len = 8 if has_value else 0
    if len(data) < end + value_len:
        raise Truncated(f"{len(data)} bytes, frame claims {end + value_len}")
    name = data[_VX_HDR.size : end].decode("ascii")
    value = struct.unpack_from(">d", data, end)[0] if has_value else None
    return ValueExchange(kind=kind, pv_name=name, sequence=sequence, value=value)
