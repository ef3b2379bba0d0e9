import pytest

from carelay.bench import (
    ARM_ORDER,
    TIMEOUT,
    VALUE,
    ConfigInvalid,
    Query,
    Sample,
    ScenarioReport,
    UnknownFormat,
    benchmark_scenarios,
    emit_report,
    execute_scenario,
    parse_records,
    run_benchmark,
    run_scenario,
    scenario_a,
    scenario_b,
    scenario_c,
)
from carelay.relay import RelayMode

# Hop counts on the shipped topology, worked out from the routing rules
# before running anything: DIRECT pays broadcast + response + read request +
# read reply inside one domain; the spoof relay adds the helper conversion
# (2 hops), the rebroadcast (1), and cross-domain response/read (2 each).
DIRECT_HOPS = 4
PERSISTENT_HOPS = 9


class TestScenarioA:
    def test_last_bound_pv_resolves_and_others_time_out(self):
        report = run_scenario(scenario_a())
        assert report.all_expected, report.mismatches
        outcomes = {s.query: s.outcome for s in report.samples}
        assert outcomes["IMX1-HOST1"] == "value:155.836"
        assert outcomes["IMX:DMC4:m1"] == "timeout"
        assert outcomes["IMX:DMC4:m2"] == "timeout"


class TestScenarioB:
    def test_all_server1_pvs_resolve_but_server2_times_out(self):
        report = run_scenario(scenario_b())
        assert report.all_expected, report.mismatches
        outcomes = {s.query: s.outcome for s in report.samples}
        assert outcomes["IMX:DMC4:m1"] == "value:-2.06e-05"
        assert outcomes["IMX:DMC4:m3"] == "timeout"


class TestScenarioC:
    def test_spoof_relay_resolves_across_both_servers(self):
        report = run_scenario(scenario_c())
        assert report.all_expected, report.mismatches

    def test_proxy_relay_resolves_across_both_servers(self):
        report = run_scenario(scenario_c(mode=RelayMode.PROXY))
        assert report.all_expected, report.mismatches

    def test_spoof_with_use_packet_source_responses(self):
        # Responders that advertise no address force the client back onto the
        # datagram source, which spoofing has preserved.
        report = run_scenario(scenario_c(advertise_own_address=False))
        assert report.all_expected, report.mismatches

    def test_relay_counters_snapshot_in_report(self):
        report = run_scenario(scenario_c())
        counters = report.counters["C-relay-spoof"]
        assert counters["relayed"] == 3
        assert counters["received"] == 3

    def test_source_preservation_visible_in_delivery_log(self):
        run = execute_scenario(scenario_c())
        responses = [
            d
            for d in run.net.delivery_log
            if d.packet.src_port == 5064 and d.host == "TesterHEpics"
        ]
        assert responses, "no search responses reached the client"
        assert all(d.packet.dst_ip == "10.2.105.171" for d in responses)


class TestScenarioValidation:
    def test_zero_repetitions_rejected(self):
        scenario = scenario_a()
        scenario.repetitions = 0
        with pytest.raises(ConfigInvalid):
            run_scenario(scenario)

    def test_unknown_client_host_rejected(self):
        scenario = scenario_a()
        scenario.queries = [Query("NOPE", "IMX1-HOST1", VALUE(155.836))]
        with pytest.raises(ConfigInvalid):
            run_scenario(scenario)

    def test_relay_host_without_config_rejected(self):
        scenario = scenario_a()
        scenario.relay_host = "IMX1-HOST1"
        with pytest.raises(ConfigInvalid):
            run_scenario(scenario)

    def test_mismatch_reported_not_raised(self):
        scenario = scenario_a()
        scenario.queries = [Query("TesterHEpics", "IMX1-HOST1", TIMEOUT)]
        report = run_scenario(scenario)
        assert not report.all_expected
        assert "IMX1-HOST1" in report.mismatches[0]


class TestBenchmark:
    def test_median_ordering_and_bounds(self):
        report = run_benchmark(repetitions=30, seed=1)
        stats = report.arm_stats
        assert report.median_ordering_ok is True
        assert stats["DIRECT"].median_us < 75_000
        assert stats["FORK_MODEL"].median_us - stats["PERSISTENT"].median_us >= 5_000

    def test_persistent_overhead_bounded_by_extra_hops(self):
        # Expected gap computed from the hop counts above, plus jitter room.
        scenarios = benchmark_scenarios(repetitions=30, seed=3, jitter_us=0)
        direct = execute_scenario(scenarios["DIRECT"], arm="DIRECT").report
        persistent = execute_scenario(scenarios["PERSISTENT"], arm="PERSISTENT").report
        per_hop = scenarios["DIRECT"].topology.per_hop_delay_us
        gap = persistent.arm_stats["PERSISTENT"].median_us - direct.arm_stats["DIRECT"].median_us
        assert gap == (PERSISTENT_HOPS - DIRECT_HOPS) * per_hop

    def test_no_time_travel(self):
        report = run_benchmark(repetitions=30, seed=2)
        per_hop = 200
        floors = {"DIRECT": DIRECT_HOPS * per_hop, "PERSISTENT": PERSISTENT_HOPS * per_hop}
        for sample in report.samples:
            if sample.arm in floors and sample.latency_us is not None:
                assert sample.latency_us >= floors[sample.arm]

    def test_sample_count_is_repetitions_times_queries(self):
        report = run_benchmark(repetitions=30, seed=0)
        assert len(report.samples) == 30 * 3 * 3

    def test_repetitions_floor(self):
        with pytest.raises(ConfigInvalid):
            run_benchmark(repetitions=10)

    def test_unknown_arm_rejected(self):
        with pytest.raises(ConfigInvalid):
            run_benchmark(arms=("DIRECT", "WARP"), repetitions=30)

    def test_subset_of_arms(self):
        report = run_benchmark(arms=("DIRECT",), repetitions=30, seed=0)
        assert list(report.arm_stats) == ["DIRECT"]
        assert report.median_ordering_ok is None


class TestDeterminism:
    def test_same_seed_byte_identical_records(self):
        first = emit_report(run_scenario(scenario_c(seed=5)), "records")
        second = emit_report(run_scenario(scenario_c(seed=5)), "records")
        assert first.encode() == second.encode()

    def test_benchmark_same_seed_byte_identical(self):
        a = emit_report(run_benchmark(repetitions=30, seed=9), "records")
        b = emit_report(run_benchmark(repetitions=30, seed=9), "records")
        assert a.encode() == b.encode()

    def test_different_seed_changes_jittered_benchmark(self):
        a = emit_report(run_benchmark(repetitions=30, seed=1), "records")
        b = emit_report(run_benchmark(repetitions=30, seed=2), "records")
        assert a != b


class TestEmitReport:
    def test_empty_report_is_header_only(self):
        report = ScenarioReport(scenario="empty", seed=0)
        assert emit_report(report, "records") == "scenario\tarm\tquery\toutcome\tlatency_us\n"

    def test_records_roundtrip(self):
        report = run_scenario(scenario_a())
        assert parse_records(emit_report(report, "records")) == report.samples

    def test_arms_listed_in_fixed_order(self):
        report = run_benchmark(repetitions=30, seed=0)
        text = emit_report(report, "text")
        positions = [text.index(arm) for arm in ARM_ORDER]
        assert positions == sorted(positions)

    def test_unknown_format(self):
        with pytest.raises(UnknownFormat):
            emit_report(ScenarioReport(scenario="x", seed=0), "yaml")

    def test_text_contains_counters_and_verdict(self):
        text = emit_report(run_scenario(scenario_c()), "text")
        assert "counters[C-relay-spoof]" in text
        assert "all queries matched" in text

    def test_timeout_sample_serialized_with_dash(self):
        report = run_scenario(scenario_a())
        records = emit_report(report, "records")
        assert "\ttimeout\t-" in records
        parsed = parse_records(records)
        assert any(s.latency_us is None for s in parsed)
