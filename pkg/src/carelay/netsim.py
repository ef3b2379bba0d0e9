"""Deterministic in-process virtual IPv4 network.

Models just enough of a routed campus network to reproduce broadcast-domain
behavior around UDP name resolution: per-host port bindings with bind order,
switch-level broadcast-to-unicast helper rules, and host-level prerouting
destination rewrites. Time is a virtual microsecond clock; every delivery is
scheduled onto a single event queue, so a fixed topology, seed, and injection
sequence always produce the same delivery log.

Delivery semantics, applied in order for each injected packet:

1. A broadcast destination (a domain's directed broadcast or the limited
   broadcast 255.255.255.255) is delivered to every host in the sender's
   domain, to all bindings on the destination port. Broadcasts never cross
   domains on their own.
2. A helper rule whose domain and port match a broadcast additionally emits
   unicast copies toward each configured destination, source preserved.
3. A unicast arrival first passes the receiving host's prerouting rules: the
   first matching rule rewrites the destination. A rewrite to the limited
   broadcast is delivered to all local bindings on the new port but is not
   re-emitted onto the wire; any other rewrite is delivered locally or
   forwarded. Without a rewrite, the packet goes only to the binding with the
   highest bind sequence on the port (last-binder delivery).
4. Each hop costs a fixed per-hop delay plus optional seeded jitter.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Callable

from .packet import Cidr, Ipv4UdpPacket

LIMITED_BROADCAST = "255.255.255.255"

DEFAULT_PER_HOP_DELAY_US = 200


class NetsimError(Exception):
    pass


class UnknownHost(NetsimError):
    pass


class NoRoute(NetsimError):
    pass


class ChannelRefused(NetsimError):
    pass


@dataclass(frozen=True)
class BroadcastDomain:
    name: str
    subnet: Cidr


@dataclass(frozen=True)
class Interface:
    ip: str
    subnet: Cidr


@dataclass(frozen=True)
class HelperRule:
    """Switch rule: convert matching broadcasts to unicast toward servers."""

    domain: str
    udp_port: int
    destinations: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.destinations:
            raise ValueError("helper rule needs at least one destination")


@dataclass(frozen=True)
class PreroutingRule:
    """Host rule: rewrite the destination of matching unicast arrivals.

    negate_src limits the rule to packets whose source lies OUTSIDE the
    prefix; None applies it to any source. A new_dst_ip equal to the limited
    broadcast makes the host accept the packet on all local bindings of
    new_dst_port without re-emitting it.
    """

    match_dst_port: int
    new_dst_ip: str
    new_dst_port: int
    negate_src: Cidr | None = None

    def applies(self, packet: Ipv4UdpPacket) -> bool:
        if packet.dst_port != self.match_dst_port:
            return False
        return self.negate_src is None or not self.negate_src.contains(packet.src_ip)


@dataclass
class SocketBinding:
    port: int
    owner: str
    bind_sequence: int
    callback: Callable[["Delivery"], None] | None = field(
        default=None, compare=False, repr=False
    )


@dataclass
class VirtualHost:
    name: str
    interfaces: list[Interface]
    prerouting_rules: list[PreroutingRule] = field(default_factory=list)
    bindings: list[SocketBinding] = field(default_factory=list)
    _bind_counter: int = field(default=0, repr=False)

    def owns_ip(self, ip: str) -> bool:
        return any(i.ip == ip for i in self.interfaces)

    def interface_for_source(self, src_ip: str) -> Interface:
        # A relay emitting spoofed sources will not match any interface;
        # fall back to the first one (hosts here have one interface per domain).
        for iface in self.interfaces:
            if iface.ip == src_ip:
                return iface
        return self.interfaces[0]

    def bindings_on(self, port: int) -> list[SocketBinding]:
        return [b for b in self.bindings if b.port == port]

    def last_binder(self, port: int) -> SocketBinding | None:
        on_port = self.bindings_on(port)
        return max(on_port, key=lambda b: b.bind_sequence) if on_port else None


@dataclass
class VirtualTopology:
    domains: list[BroadcastDomain]
    hosts: list[VirtualHost]
    helper_rules: list[HelperRule] = field(default_factory=list)
    per_hop_delay_us: int = DEFAULT_PER_HOP_DELAY_US
    jitter_us: int = 0


@dataclass
class Delivery:
    """One packet handed to one binding, as it appeared on the wire.

    wire_dst_* is the destination before any prerouting rewrite (what a
    capture on the receiving host would show); packet carries the rewritten
    destination actually seen by the endpoint.
    """

    time_us: int
    host: str
    binding: SocketBinding
    packet: Ipv4UdpPacket
    wire_dst_ip: str
    wire_dst_port: int


_DELIVERY = 0
_TIMER = 1


class ChannelSide:
    """One end of a reliable in-order duplex byte-message channel."""

    def __init__(self, net: "VirtualNetwork", host: str, peer_host: str) -> None:
        self._net = net
        self.host = host
        self.peer_host = peer_host
        self.on_message: Callable[[bytes], None] | None = None
        self._peer: "ChannelSide" | None = None
        self._last_scheduled_us = 0

    def send(self, payload: bytes) -> None:
        peer = self._peer
        assert peer is not None
        delay = self._net._hop_delay_us(self.host, peer.host)
        due = max(self._net.now_us + delay, self._last_scheduled_us)
        self._last_scheduled_us = due

        def fire() -> None:
            if peer.on_message is not None:
                peer.on_message(payload)

        self._net.call_at(due, fire)


class VirtualNetwork:
    """Sequential event loop over a VirtualTopology."""

    def __init__(self, topology: VirtualTopology, seed: int = 0) -> None:
        self.topology = topology
        self.now_us = 0
        self.delivery_log: list[Delivery] = []
        self._rng = random.Random(seed)
        self._queue: list[tuple[int, int, int, object]] = []
        self._seq = 0
        self._hosts = {h.name: h for h in topology.hosts}
        self._channel_listeners: dict[tuple[str, int], Callable] = {}
        self._validate()

    def _validate(self) -> None:
        if len(self._hosts) != len(self.topology.hosts):
            raise ValueError("duplicate host names")
        seen_ips: set[str] = set()
        subnets = {d.subnet: d for d in self.topology.domains}
        if len(subnets) != len(self.topology.domains):
            raise ValueError("duplicate domain subnets")
        domain_names = {d.name for d in self.topology.domains}
        for host in self.topology.hosts:
            if not host.interfaces:
                raise ValueError(f"{host.name} has no interfaces")
            host_domains = set()
            for iface in host.interfaces:
                if iface.ip in seen_ips:
                    raise ValueError(f"duplicate interface address {iface.ip}")
                seen_ips.add(iface.ip)
                domain = subnets.get(iface.subnet)
                if domain is None:
                    raise ValueError(f"{host.name} interface {iface.ip} matches no domain")
                if domain.name in host_domains:
                    raise ValueError(f"{host.name} has two interfaces in {domain.name}")
                host_domains.add(domain.name)
        for rule in self.topology.helper_rules:
            if rule.domain not in domain_names:
                raise ValueError(f"helper rule references unknown domain {rule.domain}")

    # -- hosts and addressing -------------------------------------------------

    def host(self, name: str) -> VirtualHost:
        try:
            return self._hosts[name]
        except KeyError:
            raise UnknownHost(name) from None

    def _host_owning(self, ip: str) -> VirtualHost | None:
        for host in self.topology.hosts:
            if host.owns_ip(ip):
                return host
        return None

    def _domain_of_interface(self, iface: Interface) -> BroadcastDomain:
        for domain in self.topology.domains:
            if domain.subnet == iface.subnet:
                return domain
        raise ValueError(f"interface {iface.ip} matches no domain")

    def _domain_containing(self, ip: str) -> BroadcastDomain | None:
        for domain in self.topology.domains:
            if domain.subnet.contains(ip):
                return domain
        return None

    def _hosts_in_domain(self, domain: BroadcastDomain) -> list[VirtualHost]:
        return [
            h
            for h in self.topology.hosts
            if any(i.subnet == domain.subnet for i in h.interfaces)
        ]

    def _is_broadcast(self, dst_ip: str) -> bool:
        if dst_ip == LIMITED_BROADCAST:
            return True
        return any(d.subnet.broadcast_address() == dst_ip for d in self.topology.domains)

    def _same_domain(self, a: str, b: str) -> bool:
        sa = {i.subnet for i in self.host(a).interfaces}
        sb = {i.subnet for i in self.host(b).interfaces}
        return bool(sa & sb)

    def _hop_delay_us(self, src_host: str, dst_host: str) -> int:
        hops = 1 if self._same_domain(src_host, dst_host) else 2
        return hops * self.topology.per_hop_delay_us + self._jitter()

    def _jitter(self) -> int:
        if self.topology.jitter_us <= 0:
            return 0
        return self._rng.randint(0, self.topology.jitter_us)

    # -- bindings -------------------------------------------------------------

    def bind(
        self,
        host_name: str,
        port: int,
        owner: str,
        callback: Callable[[Delivery], None] | None = None,
    ) -> SocketBinding:
        """Append a binding; several owners may share one port."""
        host = self.host(host_name)
        host._bind_counter += 1
        binding = SocketBinding(port=port, owner=owner, bind_sequence=host._bind_counter, callback=callback)
        host.bindings.append(binding)
        return binding

    def unbind(self, host_name: str, binding: SocketBinding) -> None:
        self.host(host_name).bindings.remove(binding)

    # -- scheduling -----------------------------------------------------------

    def _push(self, time_us: int, kind: int, item: object) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (time_us, self._seq, kind, item))

    def call_at(self, time_us: int, fn: Callable[[], None]) -> None:
        if time_us < self.now_us:
            raise ValueError(f"cannot schedule at {time_us} before now {self.now_us}")
        self._push(time_us, _TIMER, fn)

    def call_later(self, delta_us: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now_us + delta_us, fn)

    # -- packet routing -------------------------------------------------------

    def inject(
        self,
        source_host: str | None,
        packet: Ipv4UdpPacket,
        at_time_us: int | None = None,
    ) -> list[Delivery]:
        """Submit a packet; returns the deliveries it scheduled.

        source_host None means the packet enters from outside the topology
        (its origin domain is then inferred from the source address).
        """
        at = self.now_us if at_time_us is None else at_time_us
        if at < self.now_us:
            raise ValueError("cannot inject in the past")

        if source_host is not None:
            host = self.host(source_host)
            sender_domain = self._domain_of_interface(host.interface_for_source(packet.src_ip))
        else:
            sender_domain = self._domain_containing(packet.src_ip)

        deliveries: list[Delivery] = []
        if self._is_broadcast(packet.dst_ip):
            if sender_domain is None:
                raise NoRoute(f"broadcast from unknown domain (source {packet.src_ip})")
            deliveries.extend(self._route_broadcast(packet, sender_domain, at))
            deliveries.extend(self._route_helper_copies(packet, sender_domain, at))
        else:
            deliveries.extend(self._route_unicast(packet, sender_domain, at, hops=None))
        for d in deliveries:
            self._push(d.time_us, _DELIVERY, d)
        return deliveries

    def send(self, source_host: str, packet: Ipv4UdpPacket) -> list[Delivery]:
        """Inject at the current virtual time; endpoint callbacks use this."""
        return self.inject(source_host, packet, self.now_us)

    def _route_broadcast(
        self, packet: Ipv4UdpPacket, domain: BroadcastDomain, at: int
    ) -> list[Delivery]:
        out = []
        for host in self._hosts_in_domain(domain):
            due = at + self.topology.per_hop_delay_us + self._jitter()
            for binding in host.bindings_on(packet.dst_port):
                out.append(
                    Delivery(due, host.name, binding, packet, packet.dst_ip, packet.dst_port)
                )
        return out

    def _route_helper_copies(
        self, packet: Ipv4UdpPacket, domain: BroadcastDomain, at: int
    ) -> list[Delivery]:
        out = []
        for rule in self.topology.helper_rules:
            if rule.domain != domain.name or rule.udp_port != packet.dst_port:
                continue
            for dest_ip in rule.destinations:
                copy = replace(packet, dst_ip=dest_ip)
                # One hop to the helping switch, one onward to the server.
                out.extend(self._route_unicast(copy, domain, at, hops=2))
        return out

    def _route_unicast(
        self,
        packet: Ipv4UdpPacket,
        sender_domain: BroadcastDomain | None,
        at: int,
        hops: int | None,
    ) -> list[Delivery]:
        host = self._host_owning(packet.dst_ip)
        if host is None:
            raise NoRoute(f"no interface owns {packet.dst_ip}")
        if hops is None:
            in_sender_domain = sender_domain is not None and any(
                i.subnet == sender_domain.subnet for i in host.interfaces
            )
            hops = 1 if in_sender_domain else 2
        due = at + hops * self.topology.per_hop_delay_us + self._jitter()
        return self._arrive_unicast(host, packet, due, ttl=packet.ttl)

    def _arrive_unicast(
        self, host: VirtualHost, packet: Ipv4UdpPacket, due: int, ttl: int
    ) -> list[Delivery]:
        rule = next((r for r in host.prerouting_rules if r.applies(packet)), None)
        if rule is None:
            binding = host.last_binder(packet.dst_port)
            if binding is None:
                return []
            return [Delivery(due, host.name, binding, packet, packet.dst_ip, packet.dst_port)]

        rewritten = replace(packet, dst_ip=rule.new_dst_ip, dst_port=rule.new_dst_port)
        if rule.new_dst_ip == LIMITED_BROADCAST:
            # The rewrite only makes this machine accept the packet on every
            # local binding; nothing goes back onto the wire.
            return [
                Delivery(due, host.name, b, rewritten, packet.dst_ip, packet.dst_port)
                for b in host.bindings_on(rule.new_dst_port)
            ]
        if host.owns_ip(rule.new_dst_ip):
            binding = host.last_binder(rule.new_dst_port)
            if binding is None:
                return []
            return [Delivery(due, host.name, binding, rewritten, packet.dst_ip, packet.dst_port)]

        # Rewrite toward another machine: forward it, spending a hop and TTL.
        if ttl <= 1:
            return []
        next_host = self._host_owning(rule.new_dst_ip)
        if next_host is None:
            raise NoRoute(f"prerouting rewrite to unknown address {rule.new_dst_ip}")
        forwarded = replace(rewritten, ttl=ttl - 1)
        next_due = due + self.topology.per_hop_delay_us + self._jitter()
        return self._arrive_unicast(next_host, forwarded, next_due, ttl - 1)

    # -- reliable channels ----------------------------------------------------

    def register_channel_listener(
        self, ip: str, port: int, acceptor: Callable[[ChannelSide, str], None]
    ) -> None:
        """acceptor(server_side, client_host) runs when a peer connects."""
        self._channel_listeners[(ip, port)] = acceptor

    def open_channel(self, client_host: str, server_ip: str, server_port: int) -> ChannelSide:
        acceptor = self._channel_listeners.get((server_ip, server_port))
        server_host = self._host_owning(server_ip)
        if acceptor is None or server_host is None:
            raise ChannelRefused(f"nothing listening at {server_ip}:{server_port}")
        client_side = ChannelSide(self, client_host, server_host.name)
        server_side = ChannelSide(self, server_host.name, client_host)
        client_side._peer = server_side
        server_side._peer = client_side
        acceptor(server_side, client_host)
        return client_side

    # -- clock ----------------------------------------------------------------

    def advance_clock(self, duration_us: int) -> list[Delivery]:
        """Advance the clock, firing everything due within the window."""
        end = self.now_us + duration_us
        fired: list[Delivery] = []
        while self._queue and self._queue[0][0] <= end:
            fired.extend(self._step())
        self.now_us = end
        return fired

    def run_until(
        self, done: Callable[[], bool], cap_us: int | None = None
    ) -> None:
        """Fire events until done() holds, the queue drains, or cap_us."""
        while not done() and self._queue:
            if cap_us is not None and self._queue[0][0] > cap_us:
                break
            self._step()

    def _step(self) -> list[Delivery]:
        time_us, _, kind, item = heapq.heappop(self._queue)
        self.now_us = max(self.now_us, time_us)
        if kind == _DELIVERY:
            delivery = item
            self.delivery_log.append(delivery)
            if delivery.binding.callback is not None:
                delivery.binding.callback(delivery)
            return [delivery]
        item()
        return []

    # -- trace export ---------------------------------------------------------

    def trace_lines(self) -> list[str]:
        """Delivery log formatted one line per packet, capture style."""
        return [
            "%s IP %s.%d > %s.%d: UDP, length %d"
            % (
                _fmt_time(d.time_us),
                d.packet.src_ip,
                d.packet.src_port,
                d.wire_dst_ip,
                d.wire_dst_port,
                len(d.packet.payload),
            )
            for d in self.delivery_log
        ]


def _fmt_time(time_us: int) -> str:
    seconds, us = divmod(time_us, 1_000_000)
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}.{us:06d}"
