"""Command-line entry point.

Subcommands: relay (serve the relay on real sockets or drive a configured
simulation), sim (run a scenario file), bench (latency comparison), caget
and caput (test clients against the simulation or real UDP port 5064).

Exit codes: 0 success, 1 query timeout or scenario mismatch, 2 configuration
error, 3 missing privilege for raw sending.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from dataclasses import replace

from .bench import (
    ConfigInvalid,
    Scenario,
    UnknownFormat,
    emit_report,
    execute_scenario,
    run_benchmark,
)
from .config import ConfigError, ConfigFile, install_relay_prerouting, parse_config
from .endpoints import CaClient, ChannelTimeout, IocSim, RealCaClient
from .netsim import NetsimError, VirtualNetwork
from .packet import Cidr
from .relay import (
    PrivilegeRequired,
    RealUdpTransport,
    Relay,
    RelayConfig,
    RelayMode,
    SimTransport,
    TransportUnavailable,
)

log = logging.getLogger("carelay")

EXIT_OK = 0
EXIT_TIMEOUT = 1
EXIT_CONFIG = 2
EXIT_PRIVILEGE = 3

_LOG_LEVELS = {"quiet": logging.WARNING, "normal": logging.INFO, "trace": logging.DEBUG}
_MODES = {"spoof": RelayMode.SPOOF, "proxy": RelayMode.PROXY, "fork": RelayMode.FORK_MODEL}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carelay")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="configuration file")
    common.add_argument("--log", choices=sorted(_LOG_LEVELS), default="normal")
    common.add_argument("--seed", type=int, default=None, help="virtual network seed")

    sub = parser.add_subparsers(dest="command", required=True)

    relay_p = sub.add_parser("relay", parents=[common], help="run the relay")
    relay_p.add_argument("--transport", choices=("sim", "real"), default="real")
    relay_p.add_argument("--listen-port", type=int, default=None)
    relay_p.add_argument("--target", metavar="IP:PORT", default=None)
    relay_p.add_argument("--allow", metavar="CIDR", action="append", default=None)
    relay_p.add_argument("--local-subnet", metavar="CIDR", default=None)
    relay_p.add_argument("--mode", choices=sorted(_MODES), default=None)
    relay_p.add_argument("--bind-ip", default="0.0.0.0", help="real transport bind address")
    relay_p.add_argument("--format", choices=("text", "records"), default="text")
    relay_p.set_defaults(func=cmd_relay)

    sim_p = sub.add_parser("sim", parents=[common], help="run a scenario file")
    sim_p.add_argument("--format", choices=("text", "records"), default="text")
    sim_p.add_argument("--reps", type=int, default=None, help="repetitions per query")
    sim_p.set_defaults(func=cmd_sim)

    bench_p = sub.add_parser("bench", parents=[common], help="run the latency comparison")
    bench_p.add_argument("--reps", type=int, default=None)
    bench_p.add_argument("--format", choices=("text", "records"), default="text")
    bench_p.set_defaults(func=cmd_bench)

    for name in ("caget", "caput"):
        client_p = sub.add_parser(name, parents=[common], help=f"{name} test client")
        client_p.add_argument("pv", help="process variable name")
        if name == "caput":
            client_p.add_argument("value", type=float, help="value to write")
        client_p.add_argument("--transport", choices=("sim", "real"), default="sim")
        client_p.add_argument("--target", metavar="IP:PORT", action="append", default=None,
                              help="real transport search target (repeatable)")
        client_p.set_defaults(func=cmd_caget if name == "caget" else cmd_caput)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(_LOG_LEVELS[args.log])
    try:
        return args.func(args)
    except PrivilegeRequired as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRIVILEGE
    except (ConfigError, ConfigInvalid, UnknownFormat, TransportUnavailable, NetsimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _load_config(args, required: bool = False) -> ConfigFile:
    if args.config is None:
        if required:
            raise ConfigInvalid("this command needs --config PATH")
        return ConfigFile()
    with open(args.config, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _parse_target(text: str) -> tuple[str, int]:
    ip, sep, port = text.rpartition(":")
    if not sep:
        raise ConfigInvalid(f"--target expects IP:PORT, got {text!r}")
    return ip, int(port)


def _merge_relay_flags(config: ConfigFile, args) -> RelayConfig:
    relay = config.relay
    overrides = {}
    if args.listen_port is not None:
        overrides["listen_port"] = args.listen_port
    if args.target is not None:
        ip, port = _parse_target(args.target)
        overrides["target_broadcast"] = ip
        overrides["target_port"] = port
    if args.allow is not None:
        overrides["allow_sources"] = tuple(Cidr.parse(c) for c in args.allow)
    if args.local_subnet is not None:
        overrides["local_subnet"] = Cidr.parse(args.local_subnet)
    if args.mode is not None:
        overrides["mode"] = _MODES[args.mode]
    if relay is None:
        if "target_broadcast" not in overrides:
            raise ConfigInvalid("no relay target: give --target IP:PORT or a relay config section")
        return RelayConfig(**overrides)
    return replace(relay, **overrides)


def _scenario_from_config(config: ConfigFile, args, name: str = "config") -> Scenario:
    if config.topology is None:
        raise ConfigInvalid("this command needs a topology section in the config")
    if not config.queries:
        raise ConfigInvalid("this command needs a queries section in the config")
    if config.relay_install_prerouting:
        install_relay_prerouting(config)
    relay_config = config.relay if config.relay_host is not None else None
    reps = getattr(args, "reps", None)
    return Scenario(
        name=name,
        topology=config.topology,
        iocs=config.iocs,
        queries=config.queries,
        relay_config=relay_config,
        relay_host=config.relay_host,
        client_config=config.client,
        repetitions=reps if reps is not None else 1,
        seed=args.seed if args.seed is not None else config.bench.seed,
        pre_bindings=config.extra_bindings,
    )


def _run_configured_scenario(args, name: str) -> int:
    config = _load_config(args, required=True)
    scenario = _scenario_from_config(config, args, name=name)
    run = execute_scenario(scenario)
    if args.log == "trace":
        for line in run.net.trace_lines():
            print(line, file=sys.stderr)
    sys.stdout.write(emit_report(run.report, args.format))
    if not run.report.all_expected:
        for mismatch in run.report.mismatches:
            print(f"mismatch: {mismatch}", file=sys.stderr)
        return EXIT_TIMEOUT
    return EXIT_OK


def cmd_sim(args) -> int:
    return _run_configured_scenario(args, "sim")


def cmd_relay(args) -> int:
    if args.transport == "sim":
        # Same relay code path as real mode, driven by the configured queries.
        return _run_configured_scenario(args, "relay-sim")

    config = _load_config(args)
    relay_config = _merge_relay_flags(config, args)
    transport = RealUdpTransport(relay_config, bind_ip=args.bind_ip)
    relay = Relay(relay_config, transport)
    stop = threading.Event()

    def request_stop(signum, frame):
        del signum, frame
        stop.set()

    signal.signal(signal.SIGINT, request_stop)
    signal.signal(signal.SIGTERM, request_stop)
    log.info(
        "relaying %s -> %s:%d (mode %s)",
        relay_config.listen_port,
        relay_config.target_broadcast,
        relay_config.target_port,
        relay_config.mode.value,
    )
    try:
        relay.serve(stop)
    finally:
        transport.close()
        counters = vars(relay.counters)
        log.info("relay counters: %s", " ".join(f"{k}={v}" for k, v in counters.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load_config(args)
    settings = config.bench
    report = run_benchmark(
        arms=settings.arms,
        repetitions=args.reps if args.reps is not None else settings.repetitions,
        seed=args.seed if args.seed is not None else settings.seed,
        fork_cost_s=settings.fork_cost_s,
    )
    sys.stdout.write(emit_report(report, args.format))
    return EXIT_OK


def _sim_client_query(args, write_value: float | None) -> int:
    config = _load_config(args, required=True)
    if config.topology is None:
        raise ConfigInvalid("sim transport needs a topology section in the config")
    if config.client_host is None:
        raise ConfigInvalid("sim transport needs client.host in the config")
    if config.relay_install_prerouting:
        install_relay_prerouting(config)

    net = VirtualNetwork(config.topology, seed=args.seed if args.seed is not None else 0)
    for host, port, owner in config.extra_bindings:
        net.bind(host, port, owner)
    for spec in config.iocs:
        IocSim(net, spec.host, spec.name, spec.pvs, server_port=spec.server_port,
               advertise_own_address=spec.advertise_own_address)
    if config.relay is not None and config.relay_host is not None:
        Relay(config.relay, SimTransport(net, config.relay_host))
    client = CaClient(net, config.client_host, config=config.client)
    return _print_query(client, args, write_value)


def _real_client_query(args, write_value: float | None) -> int:
    config = _load_config(args)
    targets = [_parse_target(t) for t in args.target] if args.target else [("255.255.255.255", 5064)]
    client = RealCaClient(targets, config=config.client)
    return _print_query(client, args, write_value)


def _print_query(client, args, write_value: float | None) -> int:
    try:
        if write_value is None:
            value = client.caget(args.pv)
        else:
            client.caput(args.pv, write_value)
            value = write_value
    except ChannelTimeout as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_TIMEOUT
    print(f"{args.pv} {value}")
    return EXIT_OK


def cmd_caget(args) -> int:
    if args.transport == "sim":
        return _sim_client_query(args, None)
    return _real_client_query(args, None)


def cmd_caput(args) -> int:
    if args.transport == "sim":
        return _sim_client_query(args, args.value)
    return _real_client_query(args, args.value)


if __name__ == "__main__":
    sys.exit(main())
