"""IPv4+UDP datagram construction and parsing.

Builds and validates the 20-byte IPv4 header (RFC 791) and 8-byte UDP
header (RFC 768) in network byte order, including datagrams whose source
address is not the sender's own. Only plain headers are supported: no IP
options, no fragmentation, IPv4 only.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field, replace

UDP_PROTO = 17
IP_HEADER_LEN = 20
UDP_HEADER_LEN = 8
MAX_UDP_PAYLOAD = 65507  # 65535 - 20 (IP header) - 8 (UDP header)

_IP_HDR = struct.Struct("!BBHHHBBH4s4s")
_UDP_HDR = struct.Struct("!HHHH")


class PacketError(Exception):
    """Base class for encode/decode failures."""


class PayloadTooLarge(PacketError):
    pass


class Truncated(PacketError):
    pass


class NotIpv4(PacketError):
    pass


class NotUdp(PacketError):
    pass


class BadIpChecksum(PacketError):
    pass


class BadUdpChecksum(PacketError):
    pass


class OptionsUnsupported(PacketError):
    pass


def ip_to_int(ip: str) -> int:
    return int.from_bytes(socket.inet_aton(ip), "big")


def int_to_ip(value: int) -> str:
    return socket.inet_ntoa(value.to_bytes(4, "big"))


def checksum16(data: bytes) -> int:
    """Internet ones'-complement checksum (RFC 1071).

    Odd-length input is padded with a zero byte. Returns the complement of
    the ones'-complement 16-bit sum, so an empty input yields 0xFFFF.
    """
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass(frozen=True)
class Cidr:
    """IPv4 prefix; host bits of base_ip below prefix_len must be zero."""

    base_ip: str
    prefix_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.prefix_len <= 32:
            raise ValueError(f"prefix length out of range: {self.prefix_len}")
        base = ip_to_int(self.base_ip)  # also validates the dotted quad
        if base & ~self._mask() & 0xFFFFFFFF:
            raise ValueError(f"host bits set in {self.base_ip}/{self.prefix_len}")

    @classmethod
    def parse(cls, text: str) -> "Cidr":
        base, sep, plen = text.partition("/")
        if not sep:
            raise ValueError(f"not a CIDR prefix: {text!r}")
        return cls(base, int(plen))

    def _mask(self) -> int:
        if self.prefix_len == 0:
            return 0
        return (0xFFFFFFFF << (32 - self.prefix_len)) & 0xFFFFFFFF

    def contains(self, ip: str) -> bool:
        return (ip_to_int(ip) & self._mask()) == ip_to_int(self.base_ip)

    def broadcast_address(self) -> str:
        return int_to_ip(ip_to_int(self.base_ip) | (~self._mask() & 0xFFFFFFFF))

    def __str__(self) -> str:
        return f"{self.base_ip}/{self.prefix_len}"


def cidr_contains(net: Cidr, ip: str) -> bool:
    """True iff the top prefix_len bits of ip equal those of net.base_ip."""
    return net.contains(ip)


@dataclass(frozen=True)
class Ipv4UdpPacket:
    """One UDP datagram with its IPv4 header fields.

    Length and checksum fields are derived from the stored fields rather
    than carried separately, so a value is always self-consistent: encode()
    emits them, decode() verifies the wire copies against them.
    """

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    payload: bytes = b""
    ttl: int = 64
    identification: int = 0
    dscp_ecn: int = 0
    flags_fragment: int = 0

    # Fixed by the supported wire format.
    version: int = field(default=4, init=False, repr=False)
    header_length_words: int = field(default=5, init=False, repr=False)
    protocol: int = field(default=UDP_PROTO, init=False, repr=False)

    @property
    def udp_length(self) -> int:
        return UDP_HEADER_LEN + len(self.payload)

    @property
    def total_length(self) -> int:
        return IP_HEADER_LEN + self.udp_length

    @property
    def header_checksum(self) -> int:
        return checksum16(self._ip_header_bytes(checksum=0))

    @property
    def udp_checksum(self) -> int:
        """UDP checksum as transmitted: a computed 0x0000 becomes 0xFFFF."""
        raw = checksum16(self._pseudo_header() + self._udp_header_bytes(0) + self.payload)
        return raw if raw != 0 else 0xFFFF

    def _ip_header_bytes(self, checksum: int) -> bytes:
        return _IP_HDR.pack(
            (self.version << 4) | self.header_length_words,
            self.dscp_ecn,
            self.total_length,
            self.identification,
            self.flags_fragment,
            self.ttl,
            self.protocol,
            checksum,
            socket.inet_aton(self.src_ip),
            socket.inet_aton(self.dst_ip),
        )

    def _udp_header_bytes(self, checksum: int) -> bytes:
        return _UDP_HDR.pack(self.src_port, self.dst_port, self.udp_length, checksum)

    def _pseudo_header(self) -> bytes:
        return struct.pack(
            "!4s4sBBH",
            socket.inet_aton(self.src_ip),
            socket.inet_aton(self.dst_ip),
            0,
            UDP_PROTO,
            self.udp_length,
        )


def encode(packet: Ipv4UdpPacket) -> bytes:
    """Serialize to wire bytes, computing both checksums."""
    if len(packet.payload) > MAX_UDP_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(packet.payload)} bytes exceeds {MAX_UDP_PAYLOAD}")
    return (
        packet._ip_header_bytes(packet.header_checksum)
        + packet._udp_header_bytes(packet.udp_checksum)
        + packet.payload
    )


def decode(data: bytes) -> Ipv4UdpPacket:
    """Parse and validate wire bytes; inverse of encode on valid input.

    The IP checksum is verified over the first 20 bytes before any field is
    interpreted, so arbitrary header corruption surfaces as BadIpChecksum.
    A stored UDP checksum of zero means "not computed" and is accepted.
    """
    if len(data) < IP_HEADER_LEN + UDP_HEADER_LEN:
        raise Truncated(f"{len(data)} bytes is below the 28-byte minimum")

    (
        ver_ihl,
        dscp_ecn,
        total_length,
        identification,
        flags_fragment,
        ttl,
        protocol,
        stored_ip_ck,
        src_raw,
        dst_raw,
    ) = _IP_HDR.unpack_from(data)

    zeroed = data[:10] + b"\x00\x00" + data[12:IP_HEADER_LEN]
    if checksum16(zeroed) != stored_ip_ck:
        raise BadIpChecksum(f"stored 0x{stored_ip_ck:04x}, computed 0x{checksum16(zeroed):04x}")

    version = ver_ihl >> 4
    ihl = ver_ihl & 0x0F
    if version != 4:
        raise NotIpv4(f"version {version}")
    if ihl > 5:
        raise OptionsUnsupported(f"header length {ihl} words")
    if ihl < 5:
        raise NotIpv4(f"header length {ihl} words is below the IPv4 minimum")
    if protocol != UDP_PROTO:
        raise NotUdp(f"protocol {protocol}")
    if total_length > len(data) or total_length < IP_HEADER_LEN + UDP_HEADER_LEN:
        raise Truncated(f"total_length {total_length} vs {len(data)} bytes available")

    src_port, dst_port, udp_length, stored_udp_ck = _UDP_HDR.unpack_from(data, IP_HEADER_LEN)
    if udp_length != total_length - IP_HEADER_LEN or udp_length < UDP_HEADER_LEN:
        raise Truncated(f"udp_length {udp_length} inconsistent with total_length {total_length}")

    packet = Ipv4UdpPacket(
        src_ip=socket.inet_ntoa(src_raw),
        dst_ip=socket.inet_ntoa(dst_raw),
        src_port=src_port,
        dst_port=dst_port,
        payload=bytes(data[IP_HEADER_LEN + UDP_HEADER_LEN : total_length]),
        ttl=ttl,
        identification=identification,
        dscp_ecn=dscp_ecn,
        flags_fragment=flags_fragment,
    )
    if stored_udp_ck != 0 and stored_udp_ck != packet.udp_checksum:
        raise BadUdpChecksum(f"stored 0x{stored_udp_ck:04x}, computed 0x{packet.udp_checksum:04x}")
    return packet


class PacketFactory:
    """Builds outgoing packets with a monotonically increasing IP id.

    One factory per emitting context; the counter starts at 1 so a fresh
    factory never reuses an id within its own stream.
    """

    def __init__(self) -> None:
        self._next_id = 1

    def next_identification(self) -> int:
        ident = self._next_id
        self._next_id = (self._next_id % 0xFFFF) + 1
        return ident

    def build(
        self,
        src_ip: str,
        src_port: int,
        dst_ip: str,
        dst_port: int,
        payload: bytes,
        ttl: int = 64,
    ) -> Ipv4UdpPacket:
        return Ipv4UdpPacket(
            src_ip=src_ip,
            dst_ip=dst_ip,
            src_port=src_port,
            dst_port=dst_port,
            payload=payload,
            ttl=ttl,
            identification=self.next_identification(),
        )


def with_destination(packet: Ipv4UdpPacket, dst_ip: str, dst_port: int | None = None) -> Ipv4UdpPacket:
    """Copy of packet with the destination rewritten; source untouched."""
    return replace(
        packet,
        dst_ip=dst_ip,
        dst_port=packet.dst_port if dst_port is None else dst_port,
    )
