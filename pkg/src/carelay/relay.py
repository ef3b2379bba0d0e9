"""Source-preserving relay for unicast-converted name-resolution datagrams.

The relay listens on a redirect port fed by a helper/prerouting chain,
filters by source, and re-emits each accepted datagram toward a broadcast
target so every server behind it sees the query. Three modes:

* SPOOF: rebuild the datagram with the original client's source address so
  servers answer the client directly (raw-send capability needed on real
  sockets, nothing special on the virtual network).
* PROXY: forward the payload from a per-client flow port using the relay's
  own source, and pass any reply on that flow port back to the client; runs
  unprivileged.
* FORK_MODEL: PROXY plus a fixed per-request processing cost, modeling a
  relay that forks a subprocess for every query.
"""

from __future__ import annotations

import enum
import logging
import select
import socket
import threading
import time
from dataclasses import dataclass, replace

from .packet import Cidr, Ipv4UdpPacket, PacketFactory, encode

log = logging.getLogger(__name__)

DEFAULT_LISTEN_PORT = 6064
DEFAULT_TARGET_PORT = 5064
DEFAULT_TTL = 64
DEFAULT_FLOW_IDLE_TIMEOUT_S = 30.0
DEFAULT_FORK_COST_S = 0.005

FLOW_PORT_BASE = 40000


class RelayError(Exception):
    pass


class TransportUnavailable(RelayError):
    pass


class PrivilegeRequired(RelayError):
    """Raw-send capability is missing; carries a remediation hint."""


class RelayMode(enum.Enum):
    SPOOF = "spoof"
    PROXY = "proxy"
    FORK_MODEL = "fork"


class Verdict(enum.Enum):
    ACCEPT = "accept"
    DROP_LOCAL_SOURCE = "drop_local_source"
    DROP_NOT_ALLOWED = "drop_not_allowed"
    DROP_PORT_MISMATCH = "drop_port_mismatch"


@dataclass(frozen=True)
class RelayDecision:
    verdict: Verdict
    reason: str


@dataclass(frozen=True)
class RelayConfig:
    target_broadcast: str
    listen_port: int = DEFAULT_LISTEN_PORT
    target_port: int = DEFAULT_TARGET_PORT
    allow_sources: tuple[Cidr, ...] = ()
    local_subnet: Cidr | None = None
    mode: RelayMode = RelayMode.SPOOF
    flow_idle_timeout_s: float = DEFAULT_FLOW_IDLE_TIMEOUT_S
    fork_cost_s: float = DEFAULT_FORK_COST_S
    max_packets_per_second: int | None = None

    def __post_init__(self) -> None:
        for port in (self.listen_port, self.target_port):
            if not 1 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")
        if self.listen_port == self.target_port:
            raise ValueError("listen_port and target_port must differ (loop hazard)")
        if self.flow_idle_timeout_s <= 0:
            raise ValueError("flow_idle_timeout must be positive")


@dataclass
class RelayCounters:
    received: int = 0
    relayed: int = 0
    dropped_local: int = 0
    dropped_not_allowed: int = 0
    dropped_port: int = 0
    dropped_rate_limited: int = 0
    replies_forwarded: int = 0

    @property
    def dropped_total(self) -> int:
        return (
            self.dropped_local
            + self.dropped_not_allowed
            + self.dropped_port
            + self.dropped_rate_limited
        )

    def conserved(self) -> bool:
        return self.received == self.relayed + self.dropped_total


@dataclass
class FlowEntry:
    client_ip: str
    client_port: int
    relay_local_port: int
    last_activity_us: int


def classify(packet: Ipv4UdpPacket, config: RelayConfig) -> RelayDecision:
    """Filter decision, checked in fixed order: port, local source, allowlist.

    The local-source drop comes before the allowlist so loop prevention can
    never be disabled by a generous allow rule.
    """
    if packet.dst_port != config.listen_port:
        return RelayDecision(
            Verdict.DROP_PORT_MISMATCH,
            f"destination port {packet.dst_port} is not the listen port {config.listen_port}",
        )
    if config.local_subnet is not None and config.local_subnet.contains(packet.src_ip):
        return RelayDecision(
            Verdict.DROP_LOCAL_SOURCE,
            f"source {packet.src_ip} is inside the local subnet {config.local_subnet}",
        )
    if config.allow_sources and not any(net.contains(packet.src_ip) for net in config.allow_sources):
        return RelayDecision(
            Verdict.DROP_NOT_ALLOWED,
            f"source {packet.src_ip} matches no allowed prefix",
        )
    return RelayDecision(Verdict.ACCEPT, "accepted")


def rewrite_spoof(packet: Ipv4UdpPacket, config: RelayConfig, identification: int) -> Ipv4UdpPacket:
    """Rebuild an accepted datagram for broadcast, keeping the client source."""
    return replace(
        packet,
        dst_ip=config.target_broadcast,
        dst_port=config.target_port,
        identification=identification,
        ttl=DEFAULT_TTL,
    )


class Relay:
    """Sequential reactor: receive, classify, re-emit; owns all flow state."""

    def __init__(self, config: RelayConfig, transport) -> None:
        self.config = config
        self.transport = transport
        self.counters = RelayCounters()
        self.flows: dict[tuple[str, int], FlowEntry] = {}
        self._flows_by_port: dict[int, FlowEntry] = {}
        self._factory = PacketFactory()
        self._rate_window = -1
        self._rate_count = 0
        transport.attach(self)

    # -- listen-port path ------------------------------------------------------

    def handle_packet(self, packet: Ipv4UdpPacket, now_us: int) -> None:
        self.counters.received += 1
        if self._rate_limited(now_us):
            self.counters.dropped_rate_limited += 1
            return
        decision = classify(packet, self.config)
        if decision.verdict is Verdict.DROP_PORT_MISMATCH:
            self.counters.dropped_port += 1
            return
        if decision.verdict is Verdict.DROP_LOCAL_SOURCE:
            self.counters.dropped_local += 1
            log.debug("dropped local-source packet: %s", decision.reason)
            return
        if decision.verdict is Verdict.DROP_NOT_ALLOWED:
            self.counters.dropped_not_allowed += 1
            return

        self.counters.relayed += 1
        if self.config.mode is RelayMode.SPOOF:
            out = rewrite_spoof(packet, self.config, self._factory.next_identification())
            self.transport.emit_spoofed(out)
            return

        flow = self._flow_for(packet.src_ip, packet.src_port, now_us)
        payload = packet.payload

        def emit() -> None:
            self.transport.flow_send(
                flow.relay_local_port,
                payload,
                self.config.target_broadcast,
                self.config.target_port,
            )

        if self.config.mode is RelayMode.FORK_MODEL:
            self.transport.after(int(self.config.fork_cost_s * 1e6), emit)
        else:
            emit()

    def _rate_limited(self, now_us: int) -> bool:
        limit = self.config.max_packets_per_second
        if limit is None:
            return False
        window = now_us // 1_000_000
        if window != self._rate_window:
            self._rate_window = window
            self._rate_count = 0
        self._rate_count += 1
        return self._rate_count > limit

    # -- flow path (PROXY / FORK_MODEL) ----------------------------------------

    def _flow_for(self, client_ip: str, client_port: int, now_us: int) -> FlowEntry:
        key = (client_ip, client_port)
        flow = self.flows.get(key)
        if flow is None:
            port = self.transport.open_flow()
            flow = FlowEntry(client_ip, client_port, port, now_us)
            self.flows[key] = flow
            self._flows_by_port[port] = flow
        flow.last_activity_us = now_us
        return flow

    def on_flow_packet(self, local_port: int, packet: Ipv4UdpPacket, now_us: int) -> None:
        flow = self._flows_by_port.get(local_port)
        if flow is None:
            return
        flow.last_activity_us = now_us
        self.counters.replies_forwarded += 1
        self.transport.flow_send(local_port, packet.payload, flow.client_ip, flow.client_port)

    def expire_flows(self, now_us: int) -> int:
        """Drop flows idle for at least the configured timeout; returns how many."""
        timeout_us = int(self.config.flow_idle_timeout_s * 1e6)
        expired = [
            key
            for key, flow in self.flows.items()
            if now_us - flow.last_activity_us >= timeout_us
        ]
        for key in expired:
            flow = self.flows.pop(key)
            del self._flows_by_port[flow.relay_local_port]
            self.transport.close_flow(flow.relay_local_port)
        return len(expired)

    def serve(self, stop: threading.Event | None = None) -> None:
        self.transport.serve(self, stop)


class SimTransport:
    """Adapts the relay reactor onto a VirtualNetwork host."""

    EXPIRY_TICK_US = 1_000_000

    def __init__(self, net, host_name: str) -> None:
        self.net = net
        self.host_name = host_name
        self.local_ip = net.host(host_name).interfaces[0].ip
        self._factory = PacketFactory()
        self._flow_bindings: dict[int, object] = {}
        self._next_flow_port = FLOW_PORT_BASE
        self._free_flow_ports: list[int] = []
        self._relay: Relay | None = None

    def attach(self, relay: Relay) -> None:
        self._relay = relay
        self.net.bind(
            self.host_name,
            relay.config.listen_port,
            owner="relay",
            callback=lambda d: relay.handle_packet(d.packet, d.time_us),
        )
        if relay.config.mode is not RelayMode.SPOOF:
            self.net.call_later(self.EXPIRY_TICK_US, self._expiry_tick)

    def _expiry_tick(self) -> None:
        assert self._relay is not None
        self._relay.expire_flows(self.net.now_us)
        self.net.call_later(self.EXPIRY_TICK_US, self._expiry_tick)

    def now_us(self) -> int:
        return self.net.now_us

    def emit_spoofed(self, packet: Ipv4UdpPacket) -> None:
        self.net.send(self.host_name, packet)

    def open_flow(self) -> int:
        port = self._free_flow_ports.pop() if self._free_flow_ports else self._alloc_port()
        binding = self.net.bind(
            self.host_name,
            port,
            owner=f"relay-flow-{port}",
            callback=lambda d, p=port: self._relay.on_flow_packet(p, d.packet, d.time_us),
        )
        self._flow_bindings[port] = binding
        return port

    def _alloc_port(self) -> int:
        port = self._next_flow_port
        self._next_flow_port += 1
        return port

    def close_flow(self, port: int) -> None:
        binding = self._flow_bindings.pop(port)
        self.net.unbind(self.host_name, binding)
        self._free_flow_ports.append(port)

    def flow_send(self, local_port: int, payload: bytes, dst_ip: str, dst_port: int) -> None:
        packet = self._factory.build(self.local_ip, local_port, dst_ip, dst_port, payload)
        self.net.send(self.host_name, packet)

    def after(self, delay_us: int, fn) -> None:
        self.net.call_later(delay_us, fn)

    def serve(self, relay: Relay, stop: threading.Event | None = None) -> None:
        # The virtual network's owner drives the clock; attaching was enough.
        del relay, stop


class RealUdpTransport:
    """Plain-socket transport; SPOOF additionally needs raw-send capability."""

    def __init__(
        self,
        config: RelayConfig,
        bind_ip: str = "0.0.0.0",
        local_ip: str | None = None,
        socket_factory=None,
    ) -> None:
        self.config = config
        self.local_ip = local_ip or bind_ip
        # Resolved at call time so tests can substitute the module's socket.
        self._socket_factory = socket_factory or socket.socket
        self._raw = None
        try:
            self._listen = self._socket_factory(socket.AF_INET, socket.SOCK_DGRAM)
        except OSError as exc:
            raise TransportUnavailable(f"cannot create UDP socket: {exc}") from exc
        # No SO_REUSEADDR here: silently sharing the listen port would put
        # this relay on the losing side of last-binder delivery.
        try:
            self._listen.bind((bind_ip, config.listen_port))
        except OSError as exc:
            self._listen.close()
            raise TransportUnavailable(
                f"cannot bind {bind_ip}:{config.listen_port}: {exc}"
            ) from exc
        if config.mode is RelayMode.SPOOF:
            try:
                self._raw = self._socket_factory(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
                self._raw.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
            except (PermissionError, OSError) as exc:
                self._listen.close()
                raise PrivilegeRequired(
                    "spoof mode rewrites raw IP headers and needs CAP_NET_RAW; "
                    "run as root, grant the capability (setcap cap_net_raw+ep), "
                    "or use --mode proxy which runs unprivileged"
                ) from exc
        self._flow_sockets: dict[int, socket.socket] = {}
        self._relay: Relay | None = None

    def attach(self, relay: Relay) -> None:
        self._relay = relay

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def emit_spoofed(self, packet: Ipv4UdpPacket) -> None:
        assert self._raw is not None
        self._raw.sendto(encode(packet), (packet.dst_ip, 0))

    def open_flow(self) -> int:
        sock = self._socket_factory(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        sock.bind(("0.0.0.0", 0))
        port = sock.getsockname()[1]
        self._flow_sockets[port] = sock
        return port

    def close_flow(self, port: int) -> None:
        self._flow_sockets.pop(port).close()

    def flow_send(self, local_port: int, payload: bytes, dst_ip: str, dst_port: int) -> None:
        self._flow_sockets[local_port].sendto(payload, (dst_ip, dst_port))

    def after(self, delay_us: int, fn) -> None:
        # The fork-per-request cost is a serial stall by definition.
        time.sleep(delay_us / 1e6)
        fn()

    def serve(self, relay: Relay, stop: threading.Event | None = None) -> None:
        """Receive loop; returns when stop is set."""
        while stop is None or not stop.is_set():
            socks = [self._listen, *self._flow_sockets.values()]
            readable, _, _ = select.select(socks, [], [], 0.2)
            now = self.now_us()
            for sock in readable:
                data, (src_ip, src_port) = sock.recvfrom(65535)
                local_port = sock.getsockname()[1]
                packet = Ipv4UdpPacket(
                    src_ip=src_ip,
                    dst_ip=self.local_ip,
                    src_port=src_port,
                    dst_port=local_port,
                    payload=data,
                )
                if sock is self._listen:
                    relay.handle_packet(packet, now)
                else:
                    relay.on_flow_packet(local_port, packet, now)
            relay.expire_flows(self.now_us())

    def close(self) -> None:
        self._listen.close()
        if self._raw is not None:
            self._raw.close()
        for sock in self._flow_sockets.values():
            sock.close()
        self._flow_sockets.clear()


def run(config: RelayConfig, transport, stop: threading.Event | None = None) -> Relay:
    """Build a relay on the transport and serve until stopped.

    On a SimTransport this returns immediately with the attached relay (the
    simulation owner drives the clock); on a real transport it blocks.
    """
    relay = Relay(config, transport)
    relay.serve(stop)
    return relay
