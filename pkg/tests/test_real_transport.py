"""Loopback end-to-end checks of the real-socket paths.

These run the actual transport code (plain UDP for PROXY, raw IPv4 frames
for SPOOF) against stub endpoints on 127.0.0.1. The spoof test is skipped
where raw sockets are unavailable.
"""

import socket
import threading
import time

import pytest

from carelay.ca_wire import (
    SearchResponse,
    ValueExchange,
    ValueExchangeKind,
    decode_value_exchange,
    encode_search_response_datagram,
    encode_value_exchange,
    find_search_requests,
)
from carelay.endpoints import ChannelTimeout, ClientQueryConfig, RealCaClient
from carelay.packet import Cidr
from carelay.relay import (
    RealUdpTransport,
    Relay,
    RelayConfig,
    RelayMode,
    TransportUnavailable,
)


def _raw_sockets_available() -> bool:
    try:
        probe = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
    except (PermissionError, OSError):
        return False
    probe.close()
    return True


RAW_AVAILABLE = _raw_sockets_available()

FAST_CLIENT = ClientQueryConfig(
    initial_retry_s=0.1, backoff_factor=2.0, max_tries=3, total_timeout_s=2.0
)


def udp_socket(port=0):
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(("127.0.0.1", port))
    return sock


class StubIoc:
    """Minimal real-socket responder: search on one port, values on another."""

    def __init__(self, pvs: dict):
        self.pvs = dict(pvs)
        self.search_sock = udp_socket()
        self.value_sock = udp_socket()
        self.search_port = self.search_sock.getsockname()[1]
        self.value_port = self.value_sock.getsockname()[1]
        self.seen_sources: list[tuple[str, int]] = []
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._serve_search, daemon=True),
            threading.Thread(target=self._serve_values, daemon=True),
        ]
        for t in self._threads:
            t.start()

    def _serve_search(self) -> None:
        self.search_sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, addr = self.search_sock.recvfrom(65535)
            except socket.timeout:
                continue
            self.seen_sources.append(addr)
            for request in find_search_requests(data):
                if request.pv_name in self.pvs:
                    response = encode_search_response_datagram(
                        SearchResponse(
                            server_port=self.value_port,
                            search_id=request.search_id,
                            server_address="127.0.0.1",
                        )
                    )
                    self.search_sock.sendto(response, addr)

    def _serve_values(self) -> None:
        self.value_sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, addr = self.value_sock.recvfrom(65535)
            except socket.timeout:
                continue
            msg = decode_value_exchange(data)
            if msg.pv_name not in self.pvs:
                continue
            if msg.kind is ValueExchangeKind.READ_REQUEST:
                reply = ValueExchange(
                    ValueExchangeKind.READ_REPLY, msg.pv_name, msg.sequence, self.pvs[msg.pv_name]
                )
            elif msg.kind is ValueExchangeKind.WRITE_REQUEST:
                self.pvs[msg.pv_name] = msg.value
                reply = ValueExchange(ValueExchangeKind.WRITE_ACK, msg.pv_name, msg.sequence)
            else:
                continue
            self.value_sock.sendto(encode_value_exchange(reply), addr)

    def close(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        self.search_sock.close()
        self.value_sock.close()


@pytest.fixture
def stub_ioc():
    ioc = StubIoc({"LOOP:PV": 42.5})
    yield ioc
    ioc.close()


class TestRealCaClient:
    def test_caget_against_stub(self, stub_ioc):
        client = RealCaClient([("127.0.0.1", stub_ioc.search_port)], config=FAST_CLIENT)
        assert client.caget("LOOP:PV") == 42.5

    def test_caput_then_caget(self, stub_ioc):
        client = RealCaClient([("127.0.0.1", stub_ioc.search_port)], config=FAST_CLIENT)
        client.caput("LOOP:PV", -1.25)
        assert client.caget("LOOP:PV") == -1.25

    def test_unknown_pv_times_out_with_message(self, stub_ioc):
        client = RealCaClient([("127.0.0.1", stub_ioc.search_port)], config=FAST_CLIENT)
        with pytest.raises(ChannelTimeout) as excinfo:
            client.caget("MISSING:PV")
        assert str(excinfo.value) == "Channel connect timed out: 'MISSING:PV' not found."


def test_bind_conflict_reports_transport_unavailable():
    config = RelayConfig(target_broadcast="127.0.0.1", listen_port=16464, mode=RelayMode.PROXY)
    first = RealUdpTransport(config, bind_ip="127.0.0.1")
    try:
        with pytest.raises(TransportUnavailable):
            RealUdpTransport(config, bind_ip="127.0.0.1")
    finally:
        first.close()


def serve_in_thread(relay: Relay):
    stop = threading.Event()
    thread = threading.Thread(target=relay.serve, args=(stop,), daemon=True)
    thread.start()
    return stop, thread


class TestRealProxyRelay:
    def test_query_and_reply_flow_through_relay(self, stub_ioc):
        config = RelayConfig(
            target_broadcast="127.0.0.1",
            listen_port=0 or 16264,
            target_port=stub_ioc.search_port,
            mode=RelayMode.PROXY,
            local_subnet=Cidr("192.0.2.0", 24),  # nothing local on loopback
        )
        transport = RealUdpTransport(config, bind_ip="127.0.0.1", local_ip="127.0.0.1")
        relay = Relay(config, transport)
        stop, thread = serve_in_thread(relay)
        try:
            client = RealCaClient([("127.0.0.1", config.listen_port)], config=FAST_CLIENT)
            assert client.caget("LOOP:PV") == 42.5
            # The stub saw the relay's flow port, not the client.
            assert all(addr[0] == "127.0.0.1" for addr in stub_ioc.seen_sources)
            assert relay.counters.relayed >= 1
            assert relay.counters.replies_forwarded >= 1
            assert relay.counters.conserved()
        finally:
            stop.set()
            thread.join(timeout=3)
            transport.close()


@pytest.mark.skipif(not RAW_AVAILABLE, reason="raw sockets unavailable")
class TestRealSpoofRelay:
    def test_source_preserved_through_raw_rewrite(self, stub_ioc):
        config = RelayConfig(
            target_broadcast="127.0.0.1",
            listen_port=16364,
            target_port=stub_ioc.search_port,
            mode=RelayMode.SPOOF,
            local_subnet=Cidr("192.0.2.0", 24),
        )
        transport = RealUdpTransport(config, bind_ip="127.0.0.1", local_ip="127.0.0.1")
        relay = Relay(config, transport)
        stop, thread = serve_in_thread(relay)
        try:
            client = RealCaClient([("127.0.0.1", config.listen_port)], config=FAST_CLIENT)
            # The search goes to the relay, which re-emits it with the
            # client's source; the stub answers the client directly and the
            # value read proceeds without the relay in the path.
            assert client.caget("LOOP:PV") == 42.5
            deadline = time.monotonic() + 1
            while not stub_ioc.seen_sources and time.monotonic() < deadline:
                time.sleep(0.01)
            assert stub_ioc.seen_sources, "stub never saw the relayed search"
            assert relay.counters.relayed >= 1
        finally:
            stop.set()
            thread.join(timeout=3)
            transport.close()
