"""Simulated IOC servers and a caget/caput-style client.

An IocSim owns a table of scalar PVs, answers name searches on the shared
UDP search port of its host (silently ignoring names it does not own), and
serves a simplified read/write exchange over the virtual network's reliable
channel, standing in for the data circuit. The CaClient broadcasts searches
with a doubling retry schedule and resolves the first response into a value
read or write.
"""

from __future__ import annotations

import select
import socket
import time
from dataclasses import dataclass, field

from . import ca_wire
from .ca_wire import (
    SearchRequest,
    SearchResponse,
    ValueExchange,
    ValueExchangeKind,
)
from .netsim import ChannelRefused, ChannelSide, Delivery, VirtualNetwork
from .packet import PacketFactory

SEARCH_PORT = 5064


class ChannelTimeout(TimeoutError):
    """Search retries exhausted without a usable response."""


def timeout_message(pv_name: str) -> str:
    return f"Channel connect timed out: '{pv_name}' not found."


@dataclass(frozen=True)
class PvRecord:
    name: str
    value: float


@dataclass(frozen=True)
class ClientQueryConfig:
    initial_retry_s: float = 0.030
    backoff_factor: float = 2.0
    max_tries: int = 5
    total_timeout_s: float = 5.0

    def __post_init__(self) -> None:
        if self.initial_retry_s <= 0:
            raise ValueError("initial_retry must be positive")
        if self.backoff_factor <= 1:
            raise ValueError("backoff_factor must exceed 1")
        if self.max_tries < 1:
            raise ValueError("max_tries must be at least 1")
        if self.total_timeout_s < sum(w / 1e6 for w in self.wait_schedule_us()):
            raise ValueError("total_timeout must cover the scheduled waits")

    def wait_schedule_us(self) -> list[int]:
        """Wait after each send: initial_retry doubling (by backoff_factor)."""
        return [
            round(self.initial_retry_s * self.backoff_factor**k * 1e6)
            for k in range(self.max_tries)
        ]


class IocSim:
    """One IOC process: PV table, search responder, value exchange server."""

    def __init__(
        self,
        net: VirtualNetwork,
        host_name: str,
        name: str,
        pvs: dict[str, float],
        server_port: int,
        search_port: int = SEARCH_PORT,
        advertise_own_address: bool = True,
        minor_version: int = ca_wire.DEFAULT_MINOR_VERSION,
    ) -> None:
        if len(set(pvs)) != len(pvs):
            raise ValueError("PV names must be unique within one IOC")
        self.net = net
        self.host_name = host_name
        self.name = name
        self.pvs = dict(pvs)
        self.server_port = server_port
        self.search_port = search_port
        self.advertise_own_address = advertise_own_address
        self.minor_version = minor_version
        self.host_ip = net.host(host_name).interfaces[0].ip
        self.reads_served = 0
        self.writes_served = 0
        self._factory = PacketFactory()
        self.binding = net.bind(host_name, search_port, owner=name, callback=self._on_delivery)
        net.register_channel_listener(self.host_ip, server_port, self._accept_channel)

    # -- search ---------------------------------------------------------------

    def on_search_datagram(self, data: bytes, source_addr: tuple[str, int]) -> bytes | None:
        """Response datagram for the first owned name, or None (silent miss)."""
        del source_addr  # the response goes back however the caller addresses it
        for request in ca_wire.find_search_requests(data):
            if request.pv_name in self.pvs:
                return ca_wire.encode_search_response_datagram(
                    SearchResponse(
                        server_port=self.server_port,
                        search_id=request.search_id,
                        server_minor_version=self.minor_version,
                        server_address=self.host_ip if self.advertise_own_address else None,
                    )
                )
        return None

    def _on_delivery(self, delivery: Delivery) -> None:
        source = (delivery.packet.src_ip, delivery.packet.src_port)
        try:
            response = self.on_search_datagram(delivery.packet.payload, source)
        except ca_wire.CaWireError:
            return  # not CA traffic; a name server stays silent
        if response is None:
            return
        self.net.send(
            self.host_name,
            self._factory.build(self.host_ip, self.search_port, source[0], source[1], response),
        )

    # -- value exchange ---------------------------------------------------------

    def _accept_channel(self, side: ChannelSide, peer_host: str) -> None:
        del peer_host
        side.on_message = lambda payload: self._on_channel_message(side, payload)

    def _on_channel_message(self, side: ChannelSide, payload: bytes) -> None:
        msg = ca_wire.decode_value_exchange(payload)
        if msg.pv_name not in self.pvs:
            return
        if msg.kind is ValueExchangeKind.READ_REQUEST:
            self.reads_served += 1
            reply = ValueExchange(
                ValueExchangeKind.READ_REPLY, msg.pv_name, msg.sequence, self.pvs[msg.pv_name]
            )
            side.send(ca_wire.encode_value_exchange(reply))
        elif msg.kind is ValueExchangeKind.WRITE_REQUEST:
            self.writes_served += 1
            self.pvs[msg.pv_name] = msg.value
            ack = ValueExchange(ValueExchangeKind.WRITE_ACK, msg.pv_name, msg.sequence)
            side.send(ca_wire.encode_value_exchange(ack))


@dataclass
class QueryResult:
    pv_name: str
    operation: str
    value: float | None = None
    timed_out: bool = False
    started_us: int = 0
    finished_us: int = 0
    send_times_us: list[int] = field(default_factory=list)
    responses_seen: int = 0

    @property
    def latency_us(self) -> int | None:
        return None if self.timed_out else self.finished_us - self.started_us

    @property
    def outcome(self) -> str:
        return "timeout" if self.timed_out else f"value:{self.value!r}"


class _PendingQuery:
    def __init__(self, pv_name: str, operation: str, write_value: float | None) -> None:
        self.pv_name = pv_name
        self.operation = operation
        self.write_value = write_value
        self.result: QueryResult | None = None
        self.resolved = False
        self.done = False
        self.send_times: list[int] = []
        self.responses = 0


class CaClient:
    """Sequential search-and-fetch client over the virtual network."""

    def __init__(
        self,
        net: VirtualNetwork,
        host_name: str,
        config: ClientQueryConfig | None = None,
        address_list: list[tuple[str, int]] | None = None,
        name: str = "client",
        first_ephemeral_port: int = 35687,
    ) -> None:
        self.net = net
        self.host_name = host_name
        self.config = config or ClientQueryConfig()
        self.name = name
        host = net.host(host_name)
        self.host_ip = host.interfaces[0].ip
        if address_list is None:
            address_list = [(host.interfaces[0].subnet.broadcast_address(), SEARCH_PORT)]
        self.address_list = address_list
        self._factory = PacketFactory()
        self._next_ephemeral = first_ephemeral_port
        self._next_search_id = 1
        self._next_sequence = 1

    # -- public operations ------------------------------------------------------

    def caget(self, pv_name: str) -> float:
        result = self.query(pv_name)
        if result.timed_out:
            raise ChannelTimeout(timeout_message(pv_name))
        return result.value

    def caput(self, pv_name: str, value: float) -> None:
        result = self.query(pv_name, write_value=value)
        if result.timed_out:
            raise ChannelTimeout(timeout_message(pv_name))

    def query(self, pv_name: str, write_value: float | None = None) -> QueryResult:
        """Run one full resolution on the virtual clock; never raises on timeout."""
        operation = "read" if write_value is None else "write"
        pending = _PendingQuery(pv_name, operation, write_value)
        search_id = self._next_search_id
        self._next_search_id += 1
        eph_port = self._next_ephemeral
        self._next_ephemeral += 1

        datagram = ca_wire.encode_search_datagram(SearchRequest(pv_name, search_id))
        binding = self.net.bind(
            self.host_name,
            eph_port,
            owner=f"{self.name}:{pv_name}",
            callback=lambda d: self._on_datagram(pending, search_id, eph_port, d),
        )

        started = self.net.now_us
        waits = self.config.wait_schedule_us()
        offset = 0
        for attempt in range(self.config.max_tries):
            self.net.call_at(
                started + offset,
                lambda: self._send_search(pending, datagram, eph_port),
            )
            offset += waits[attempt]
        deadline = started + min(offset, round(self.config.total_timeout_s * 1e6))
        self.net.call_at(deadline, lambda: self._give_up(pending))

        self.net.run_until(lambda: pending.done, cap_us=deadline + 2 * offset + 1_000_000)
        self.net.unbind(self.host_name, binding)

        if pending.result is None:  # queue drained or cap hit without a verdict
            pending.result = QueryResult(pv_name, operation, timed_out=True)
        result = pending.result
        result.started_us = started
        result.send_times_us = pending.send_times
        result.responses_seen = pending.responses
        return result

    # -- internals ---------------------------------------------------------------

    def _send_search(self, pending: _PendingQuery, datagram: bytes, eph_port: int) -> None:
        if pending.resolved or pending.done:
            return
        pending.send_times.append(self.net.now_us)
        for ip, port in self.address_list:
            self.net.send(
                self.host_name,
                self._factory.build(self.host_ip, eph_port, ip, port, datagram),
            )

    def _give_up(self, pending: _PendingQuery) -> None:
        # The deadline covers the search phase only; a resolved query is
        # already reading its value and the run cap bounds that instead.
        if pending.done or pending.resolved:
            return
        pending.done = True
        pending.result = QueryResult(
            pending.pv_name, pending.operation, timed_out=True, finished_us=self.net.now_us
        )

    def _on_datagram(self, pending: _PendingQuery, search_id: int, eph_port: int, delivery: Delivery) -> None:
        del eph_port
        if pending.done:
            return
        try:
            response = ca_wire.find_search_response(delivery.packet.payload)
        except ca_wire.CaWireError:
            return
        if response is None or response.search_id != search_id:
            return
        pending.responses += 1
        if pending.resolved:
            return  # first response wins; duplicates are ignored
        server_ip = response.server_address or delivery.packet.src_ip
        try:
            side = self.net.open_channel(self.host_name, server_ip, response.server_port)
        except ChannelRefused:
            return  # unusable responder; keep waiting for another response
        pending.resolved = True
        sequence = self._next_sequence
        self._next_sequence += 1
        if pending.operation == "read":
            request = ValueExchange(ValueExchangeKind.READ_REQUEST, pending.pv_name, sequence)
        else:
            request = ValueExchange(
                ValueExchangeKind.WRITE_REQUEST, pending.pv_name, sequence, pending.write_value
            )
        side.on_message = lambda payload: self._on_channel_reply(pending, sequence, payload)
        side.send(ca_wire.encode_value_exchange(request))

    def _on_channel_reply(self, pending: _PendingQuery, sequence: int, payload: bytes) -> None:
        if pending.done:
            return
        msg = ca_wire.decode_value_exchange(payload)
        if msg.sequence != sequence or msg.pv_name != pending.pv_name:
            return
        if pending.operation == "read" and msg.kind is ValueExchangeKind.READ_REPLY:
            pending.result = QueryResult(
                pending.pv_name, "read", value=msg.value, finished_us=self.net.now_us
            )
            pending.done = True
        elif pending.operation == "write" and msg.kind is ValueExchangeKind.WRITE_ACK:
            pending.result = QueryResult(
                pending.pv_name, "write", value=pending.write_value, finished_us=self.net.now_us
            )
            pending.done = True


class RealCaClient:
    """Blocking caget/caput over real UDP sockets, for manual checks.

    Searches follow the same retry schedule as the simulated client. The
    value phase sends one framed read/write datagram to the resolved server
    port, so it completes only against this package's own endpoints; against
    a stock IOC the search still resolves, which is the interoperability
    signal this client exists to provide.
    """

    def __init__(
        self,
        targets: list[tuple[str, int]],
        config: ClientQueryConfig | None = None,
    ) -> None:
        if not targets:
            raise ValueError("at least one search target required")
        self.targets = targets
        self.config = config or ClientQueryConfig()
        self._next_search_id = 1
        self._next_sequence = 1

    def caget(self, pv_name: str) -> float:
        value = self._query(pv_name, None)
        if value is None:
            raise ChannelTimeout(timeout_message(pv_name))
        return value

    def caput(self, pv_name: str, value: float) -> None:
        if self._query(pv_name, value) is None:
            raise ChannelTimeout(timeout_message(pv_name))

    def _query(self, pv_name: str, write_value: float | None) -> float | None:
        search_id = self._next_search_id
        self._next_search_id += 1
        datagram = ca_wire.encode_search_datagram(SearchRequest(pv_name, search_id))
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        sock.bind(("0.0.0.0", 0))
        try:
            resolved = self._search(sock, datagram, search_id)
            if resolved is None:
                return None
            return self._exchange_value(pv_name, write_value, *resolved)
        finally:
            sock.close()

    def _search(self, sock: socket.socket, datagram: bytes, search_id: int):
        deadline = time.monotonic() + self.config.total_timeout_s
        for wait_us in self.config.wait_schedule_us():
            for target in self.targets:
                sock.sendto(datagram, target)
            until = min(time.monotonic() + wait_us / 1e6, deadline)
            while True:
                remaining = until - time.monotonic()
                if remaining <= 0:
                    break
                readable, _, _ = select.select([sock], [], [], remaining)
                if not readable:
                    break
                data, addr = sock.recvfrom(65535)
                try:
                    response = ca_wire.find_search_response(data)
                except ca_wire.CaWireError:
                    continue
                if response is None or response.search_id != search_id:
                    continue
                server_ip = response.server_address or addr[0]
                return server_ip, response.server_port
            if time.monotonic() >= deadline:
                break
        return None

    def _exchange_value(
        self, pv_name: str, write_value: float | None, server_ip: str, server_port: int
    ) -> float | None:
        sequence = self._next_sequence
        self._next_sequence += 1
        if write_value is None:
            request = ValueExchange(ValueExchangeKind.READ_REQUEST, pv_name, sequence)
        else:
            request = ValueExchange(
                ValueExchangeKind.WRITE_REQUEST, pv_name, sequence, write_value
            )
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.sendto(ca_wire.encode_value_exchange(request), (server_ip, server_port))
            readable, _, _ = select.select([sock], [], [], self.config.total_timeout_s)
            if not readable:
                return None
            data, _ = sock.recvfrom(65535)
            try:
                msg = ca_wire.decode_value_exchange(data)
            except ca_wire.CaWireError:
                return None
            if msg.sequence != sequence or msg.pv_name != pv_name:
                return None
            if write_value is None and msg.kind is ValueExchangeKind.READ_REPLY:
                return msg.value
            if write_value is not None and msg.kind is ValueExchangeKind.WRITE_ACK:
                return write_value
            return None
        finally:
            sock.close()
