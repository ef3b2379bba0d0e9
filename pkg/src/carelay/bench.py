"""Scenario runner and latency benchmark.

Ships the canonical two-subnet test network (a beamline segment with two
multi-IOC servers, a client segment behind a broadcast-to-unicast helper)
and three scripted scenarios on top of it:

* A -- helper conversion only: the unicast lands on the last-bound IOC, so
  exactly one PV per server resolves and everything else times out.
* B -- plus a prerouting rewrite to the limited broadcast on server 1: all
  of server 1's PVs resolve, but the rewrite never re-emits onto the wire,
  so server 2 stays unreachable.
* C -- plus the relay: queries resolve across both servers.

The benchmark compares resolution latency for a client inside the target
subnet (DIRECT), the source-preserving relay (PERSISTENT), and the
fork-per-request cost model (FORK_MODEL) on the virtual clock.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .endpoints import CaClient, ClientQueryConfig, IocSim
from .netsim import (
    BroadcastDomain,
    HelperRule,
    Interface,
    PreroutingRule,
    VirtualHost,
    VirtualNetwork,
    VirtualTopology,
)
from .packet import Cidr
from .relay import Relay, RelayConfig, RelayMode, SimTransport

ARM_ORDER = ("DIRECT", "PERSISTENT", "FORK_MODEL")

BEAMLINE_SUBNET = Cidr("10.2.1.0", 24)
CLIENT_SUBNET = Cidr("10.2.105.0", 24)
SERVER1 = "IMX1-HOST1"
SERVER1_IP = "10.2.1.31"
SERVER2 = "IMX1-HOST2"
SERVER2_IP = "10.2.1.32"
CLIENT = "TesterHEpics"
CLIENT_IP = "10.2.105.171"
DIRECT_CLIENT = "TesterDirect"
DIRECT_CLIENT_IP = "10.2.1.100"

# Server 1 runs seven IOCs; the uptime IOC binds last and therefore owns the
# only PV reachable through a bare unicast conversion.
SERVER1_IOCS = (
    ("dmc4-m1", {"IMX:DMC4:m1": -2.06e-05}),
    ("dmc4-m2", {"IMX:DMC4:m2": -1.47e-05}),
    ("dmc4-m4", {"IMX:DMC4:m4": 3.1e-04}),
    ("dmc4-m5", {"IMX:DMC4:m5": -8.9e-05}),
    ("pfcu", {"IMX:PFCU:filter": 1.0}),
    ("digital", {"IMX:DIO:bit0": 0.0}),
    ("hostuptime", {"IMX1-HOST1": 155.836}),
)
SERVER2_IOCS = (
    ("dmc4b-m3", {"IMX:DMC4:m3": 0.002496}),
    ("hostuptime2", {"IMX1-HOST2": 12.5}),
)


class BenchError(Exception):
    pass


class ConfigInvalid(BenchError):
    pass


class UnknownFormat(BenchError):
    pass


@dataclass(frozen=True)
class ExpectedOutcome:
    kind: str  # "value" or "timeout"
    value: float | None = None


def VALUE(x: float) -> ExpectedOutcome:
    return ExpectedOutcome("value", x)


TIMEOUT = ExpectedOutcome("timeout")


@dataclass(frozen=True)
class Query:
    client_host: str
    pv_name: str
    expected: ExpectedOutcome


@dataclass(frozen=True)
class IocSpec:
    host: str
    name: str
    pvs: dict
    server_port: int
    advertise_own_address: bool = True


@dataclass
class Scenario:
    name: str
    topology: VirtualTopology
    iocs: list[IocSpec]
    queries: list[Query]
    relay_config: RelayConfig | None = None
    relay_host: str | None = None
    client_config: ClientQueryConfig = field(default_factory=ClientQueryConfig)
    repetitions: int = 1
    seed: int = 0
    # Bare (host, port, owner) bindings, bound before the IOCs.
    pre_bindings: list[tuple[str, int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class Sample:
    scenario: str
    arm: str
    query: str
    outcome: str
    latency_us: int | None


@dataclass(frozen=True)
class ArmStats:
    count: int
    median_us: float
    mean_us: float
    p95_us: int
    max_us: int


@dataclass
class ScenarioReport:
    scenario: str
    seed: int
    samples: list[Sample] = field(default_factory=list)
    arm_stats: dict[str, ArmStats] = field(default_factory=dict)
    mismatches: list[str] = field(default_factory=list)
    counters: dict[str, dict[str, int]] = field(default_factory=dict)
    median_ordering_ok: bool | None = None

    @property
    def all_expected(self) -> bool:
        return not self.mismatches

    def arms_in_order(self) -> list[str]:
        fixed = [a for a in ARM_ORDER if a in self.arm_stats]
        rest = [a for a in self.arm_stats if a not in ARM_ORDER]
        return fixed + rest


@dataclass
class ScenarioRun:
    """Execution artifacts: the report plus the live harness for inspection."""

    report: ScenarioReport
    net: VirtualNetwork
    relay: Relay | None
    clients: dict[str, CaClient]


def paper_topology(
    include_direct_client: bool = False,
    prerouting_server1: list[PreroutingRule] | None = None,
    per_hop_delay_us: int = 200,
    jitter_us: int = 0,
) -> VirtualTopology:
    hosts = [
        VirtualHost(
            SERVER1,
            [Interface(SERVER1_IP, BEAMLINE_SUBNET)],
            prerouting_rules=list(prerouting_server1 or []),
        ),
        VirtualHost(SERVER2, [Interface(SERVER2_IP, BEAMLINE_SUBNET)]),
        VirtualHost(CLIENT, [Interface(CLIENT_IP, CLIENT_SUBNET)]),
    ]
    if include_direct_client:
        hosts.append(VirtualHost(DIRECT_CLIENT, [Interface(DIRECT_CLIENT_IP, BEAMLINE_SUBNET)]))
    return VirtualTopology(
        domains=[
            BroadcastDomain("beamline", BEAMLINE_SUBNET),
            BroadcastDomain("sol", CLIENT_SUBNET),
        ],
        hosts=hosts,
        helper_rules=[HelperRule("sol", 5064, (SERVER1_IP,))],
        per_hop_delay_us=per_hop_delay_us,
        jitter_us=jitter_us,
    )


def paper_iocs(advertise_own_address: bool = True) -> list[IocSpec]:
    specs = []
    port = 5901
    for name, pvs in SERVER1_IOCS:
        specs.append(IocSpec(SERVER1, name, dict(pvs), port, advertise_own_address))
        port += 1
    for name, pvs in SERVER2_IOCS:
        specs.append(IocSpec(SERVER2, name, dict(pvs), port, advertise_own_address))
        port += 1
    return specs


def relay_prerouting_rule(listen_port: int = 6064) -> PreroutingRule:
    """The redirect that feeds the relay: foreign 5064 traffic to listen_port."""
    return PreroutingRule(5064, SERVER1_IP, listen_port, negate_src=BEAMLINE_SUBNET)


def limited_broadcast_rule() -> PreroutingRule:
    """The local-acceptance rewrite: foreign 5064 traffic to 255.255.255.255."""
    return PreroutingRule(5064, "255.255.255.255", 5064, negate_src=BEAMLINE_SUBNET)


def paper_relay_config(mode: RelayMode = RelayMode.SPOOF) -> RelayConfig:
    return RelayConfig(
        target_broadcast="255.255.255.255",
        listen_port=6064,
        target_port=5064,
        allow_sources=(CLIENT_SUBNET,),
        local_subnet=BEAMLINE_SUBNET,
        mode=mode,
    )


def scenario_a(seed: int = 0) -> Scenario:
    return Scenario(
        name="A-helper-only",
        topology=paper_topology(),
        iocs=paper_iocs(),
        queries=[
            Query(CLIENT, "IMX1-HOST1", VALUE(155.836)),
            Query(CLIENT, "IMX:DMC4:m1", TIMEOUT),
            Query(CLIENT, "IMX:DMC4:m2", TIMEOUT),
        ],
        seed=seed,
    )


def scenario_b(seed: int = 0) -> Scenario:
    queries = [
        Query(CLIENT, pv, VALUE(value))
        for _, pvs in SERVER1_IOCS
        for pv, value in pvs.items()
    ]
    queries.append(Query(CLIENT, "IMX:DMC4:m3", TIMEOUT))
    return Scenario(
        name="B-prerouting-rewrite",
        topology=paper_topology(prerouting_server1=[limited_broadcast_rule()]),
        iocs=paper_iocs(),
        queries=queries,
        seed=seed,
    )


def scenario_c(
    seed: int = 0,
    mode: RelayMode = RelayMode.SPOOF,
    advertise_own_address: bool = True,
) -> Scenario:
    return Scenario(
        name=f"C-relay-{mode.value}",
        topology=paper_topology(prerouting_server1=[relay_prerouting_rule()]),
        iocs=paper_iocs(advertise_own_address),
        queries=[
            Query(CLIENT, "IMX:DMC4:m1", VALUE(-2.06e-05)),
            Query(CLIENT, "IMX1-HOST1", VALUE(155.836)),
            Query(CLIENT, "IMX:DMC4:m3", VALUE(0.002496)),
        ],
        relay_config=paper_relay_config(mode),
        relay_host=SERVER1,
        seed=seed,
    )


def _matches(expected: ExpectedOutcome, outcome_timed_out: bool, value: float | None) -> bool:
    if expected.kind == "timeout":
        return outcome_timed_out
    return not outcome_timed_out and value == expected.value


def execute_scenario(scenario: Scenario, arm: str | None = None) -> ScenarioRun:
    """Run every query repetitions times on a fresh network."""
    if scenario.repetitions < 1:
        raise ConfigInvalid("repetitions must be at least 1")
    if not scenario.queries:
        raise ConfigInvalid("scenario has no queries")
    if (scenario.relay_config is None) != (scenario.relay_host is None):
        raise ConfigInvalid("relay_config and relay_host go together")
    host_names = {h.name for h in scenario.topology.hosts}
    for query in scenario.queries:
        if query.client_host not in host_names:
            raise ConfigInvalid(f"unknown client host {query.client_host}")
    for spec in scenario.iocs:
        if spec.host not in host_names:
            raise ConfigInvalid(f"unknown IOC host {spec.host}")

    net = VirtualNetwork(scenario.topology, seed=scenario.seed)
    for host, port, owner in scenario.pre_bindings:
        net.bind(host, port, owner)
    for spec in scenario.iocs:
        IocSim(
            net,
            spec.host,
            spec.name,
            spec.pvs,
            server_port=spec.server_port,
            advertise_own_address=spec.advertise_own_address,
        )
    relay = None
    if scenario.relay_config is not None:
        relay = Relay(scenario.relay_config, SimTransport(net, scenario.relay_host))

    clients: dict[str, CaClient] = {}
    arm_name = arm or scenario.name
    report = ScenarioReport(scenario=scenario.name, seed=scenario.seed)
    for _ in range(scenario.repetitions):
        for query in scenario.queries:
            client = clients.get(query.client_host)
            if client is None:
                client = CaClient(net, query.client_host, config=scenario.client_config)
                clients[query.client_host] = client
            result = client.query(query.pv_name)
            report.samples.append(
                Sample(scenario.name, arm_name, query.pv_name, result.outcome, result.latency_us)
            )
            if not _matches(query.expected, result.timed_out, result.value):
                report.mismatches.append(
                    f"{arm_name}/{query.pv_name}: expected {query.expected}, got {result.outcome}"
                )
    _fill_stats(report)
    if relay is not None:
        report.counters[arm_name] = dict(vars(relay.counters))
    return ScenarioRun(report, net, relay, clients)


def run_scenario(scenario: Scenario) -> ScenarioReport:
    return execute_scenario(scenario).report


def benchmark_scenarios(
    repetitions: int,
    seed: int,
    fork_cost_s: float = 0.005,
    jitter_us: int = 10,
) -> dict[str, Scenario]:
    """One scenario per benchmark arm, on the common paper network."""
    queries = [
        Query(DIRECT_CLIENT, "IMX:DMC4:m1", VALUE(-2.06e-05)),
        Query(DIRECT_CLIENT, "IMX1-HOST1", VALUE(155.836)),
        Query(DIRECT_CLIENT, "IMX:DMC4:m3", VALUE(0.002496)),
    ]
    direct = Scenario(
        name="bench",
        topology=paper_topology(include_direct_client=True, jitter_us=jitter_us),
        iocs=paper_iocs(),
        queries=queries,
        repetitions=repetitions,
        seed=seed,
    )

    def relayed(mode: RelayMode, arm_seed: int) -> Scenario:
        scenario = scenario_c(seed=arm_seed, mode=mode)
        scenario.name = "bench"
        scenario.topology.jitter_us = jitter_us
        scenario.repetitions = repetitions
        if mode is RelayMode.FORK_MODEL:
            scenario.relay_config = RelayConfig(
                target_broadcast="255.255.255.255",
                listen_port=6064,
                target_port=5064,
                allow_sources=(CLIENT_SUBNET,),
                local_subnet=BEAMLINE_SUBNET,
                mode=mode,
                fork_cost_s=fork_cost_s,
            )
        return scenario

    return {
        "DIRECT": direct,
        "PERSISTENT": relayed(RelayMode.SPOOF, seed + 1),
        "FORK_MODEL": relayed(RelayMode.FORK_MODEL, seed + 2),
    }


def run_benchmark(
    arms: tuple[str, ...] = ARM_ORDER,
    repetitions: int = 100,
    seed: int = 0,
    fork_cost_s: float = 0.005,
) -> ScenarioReport:
    if repetitions < 30:
        raise ConfigInvalid("benchmark needs at least 30 repetitions")
    unknown = set(arms) - set(ARM_ORDER)
    if unknown:
        raise ConfigInvalid(f"unknown arms: {sorted(unknown)}")

    scenarios = benchmark_scenarios(repetitions, seed, fork_cost_s)
    report = ScenarioReport(scenario="bench", seed=seed)
    for arm in ARM_ORDER:
        if arm not in arms:
            continue
        run = execute_scenario(scenarios[arm], arm=arm)
        report.samples.extend(run.report.samples)
        report.mismatches.extend(run.report.mismatches)
        report.counters.update(run.report.counters)
    _fill_stats(report)

    medians = {arm: report.arm_stats[arm].median_us for arm in report.arm_stats}
    if all(arm in medians for arm in ARM_ORDER):
        report.median_ordering_ok = (
            medians["DIRECT"] <= medians["PERSISTENT"] <= medians["FORK_MODEL"]
        )
    return report


def _fill_stats(report: ScenarioReport) -> None:
    by_arm: dict[str, list[int]] = {}
    for sample in report.samples:
        if sample.latency_us is not None:
            by_arm.setdefault(sample.arm, []).append(sample.latency_us)
    report.arm_stats = {
        arm: ArmStats(
            count=len(values),
            median_us=statistics.median(values),
            mean_us=statistics.fmean(values),
            p95_us=sorted(values)[max(0, -(-len(values) * 95 // 100) - 1)],
            max_us=max(values),
        )
        for arm, values in by_arm.items()
    }


RECORD_HEADER = "scenario\tarm\tquery\toutcome\tlatency_us"


def emit_report(report: ScenarioReport, fmt: str) -> str:
    if fmt == "records":
        return _emit_records(report)
    if fmt == "text":
        return _emit_text(report)
    raise UnknownFormat(f"unknown report format {fmt!r}")


def _emit_records(report: ScenarioReport) -> str:
    lines = [RECORD_HEADER]
    for s in report.samples:
        latency = "-" if s.latency_us is None else str(s.latency_us)
        lines.append(f"{s.scenario}\t{s.arm}\t{s.query}\t{s.outcome}\t{latency}")
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> list[Sample]:
    lines = text.splitlines()
    if not lines or lines[0] != RECORD_HEADER:
        raise ValueError("missing record header")
    samples = []
    for line in lines[1:]:
        scenario, arm, query, outcome, latency = line.split("\t")
        samples.append(
            Sample(scenario, arm, query, outcome, None if latency == "-" else int(latency))
        )
    return samples


def _emit_text(report: ScenarioReport) -> str:
    lines = [f"scenario: {report.scenario}  seed: {report.seed}"]
    lines.append(f"{'arm':<14} {'count':>6} {'median_us':>10} {'mean_us':>10} {'p95_us':>8} {'max_us':>8}")
    for arm in report.arms_in_order():
        stats = report.arm_stats[arm]
        lines.append(
            f"{arm:<14} {stats.count:>6} {stats.median_us:>10.1f} "
            f"{stats.mean_us:>10.1f} {stats.p95_us:>8} {stats.max_us:>8}"
        )
    if report.median_ordering_ok is not None:
        lines.append(f"median ordering DIRECT <= PERSISTENT <= FORK_MODEL: {report.median_ordering_ok}")
    for arm, counters in report.counters.items():
        pairs = " ".join(f"{k}={v}" for k, v in counters.items())
        lines.append(f"counters[{arm}]: {pairs}")
    if report.mismatches:
        lines.append("mismatches:")
        lines.extend(f"  {m}" for m in report.mismatches)
    else:
        lines.append("all queries matched their expected outcomes")
    return "\n".join(lines) + "\n"
