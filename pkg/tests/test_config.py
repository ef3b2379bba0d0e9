from pathlib import Path

import pytest

from carelay.config import ParseError, ValidationError, install_relay_prerouting, parse_config
from carelay.netsim import LIMITED_BROADCAST
from carelay.packet import Cidr
from carelay.relay import RelayMode

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

MINIMAL_TOPOLOGY = """
topology:
  domains:
    - name: lab
      subnet: 192.168.7.0/24
  hosts:
    - name: alpha
      interfaces:
        - ip: 192.168.7.1
          subnet: 192.168.7.0/24
"""


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["scenario_a.yaml", "scenario_b.yaml", "scenario_c.yaml"])
    def test_every_shipped_config_parses(self, name):
        config = parse_config((CONFIG_DIR / name).read_text())
        assert config.topology is not None
        assert config.queries

    def test_scenario_c_matches_relay_setup(self):
        config = parse_config((CONFIG_DIR / "scenario_c.yaml").read_text())
        assert config.relay is not None
        assert config.relay.listen_port == 6064
        assert config.relay.mode is RelayMode.SPOOF
        assert config.relay_host == "IMX1-HOST1"
        assert config.relay_install_prerouting
        assert len(config.iocs) == 9

    def test_scenario_b_has_limited_broadcast_rewrite(self):
        config = parse_config((CONFIG_DIR / "scenario_b.yaml").read_text())
        host1 = next(h for h in config.topology.hosts if h.name == "IMX1-HOST1")
        (rule,) = host1.prerouting_rules
        assert rule.new_dst_ip == LIMITED_BROADCAST
        assert rule.negate_src == Cidr("10.2.1.0", 24)


class TestParseErrors:
    def test_yaml_syntax_error_names_line(self):
        with pytest.raises(ParseError) as excinfo:
            parse_config("topology:\n  domains: [\n")
        assert excinfo.value.line is not None

    def test_non_mapping_root(self):
        with pytest.raises(ValidationError):
            parse_config("- just\n- a\n- list\n")

    def test_empty_input_is_empty_config(self):
        config = parse_config("")
        assert config.topology is None
        assert config.queries == []


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("wat: 1\n")
        assert excinfo.value.key == "wat"

    def test_listen_port_zero_names_key(self):
        text = "relay:\n  target_broadcast: 255.255.255.255\n  listen_port: 0\n"
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "listen_port" in excinfo.value.key

    def test_spoof_without_target_broadcast(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("relay:\n  mode: spoof\n  listen_port: 6064\n")
        assert "target_broadcast" in excinfo.value.key

    def test_bad_mode(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("relay:\n  target_broadcast: 1.2.3.4\n  mode: teleport\n")
        assert "mode" in excinfo.value.key

    def test_bad_cidr_names_key(self):
        text = MINIMAL_TOPOLOGY.replace("192.168.7.0/24", "192.168.7.5/24", 1)
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "subnet" in excinfo.value.key

    def test_unknown_key_inside_host(self):
        text = MINIMAL_TOPOLOGY + "      color: blue\n"
        with pytest.raises(ValidationError):
            parse_config(text)

    def test_query_for_unknown_host(self):
        text = MINIMAL_TOPOLOGY + "queries:\n  - client: ghost\n    pv: X\n    value: 1.0\n"
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "client" in excinfo.value.key

    def test_timeout_query_with_value_rejected(self):
        text = MINIMAL_TOPOLOGY + (
            "queries:\n  - client: alpha\n    pv: X\n    expect: timeout\n    value: 1.0\n"
        )
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "value" in excinfo.value.key

    def test_ioc_on_unknown_host(self):
        text = MINIMAL_TOPOLOGY + "  iocs:\n    - host: ghost\n      name: x\n      pvs: {A: 1.0}\n"
        # iocs is nested under topology in the source text
        text = text.replace("\n  iocs:", "\n  iocs:")
        with pytest.raises(ValidationError):
            parse_config(text)

    def test_bench_unknown_arm(self):
        with pytest.raises(ValidationError) as excinfo:
            parse_config("bench:\n  arms: [WARP]\n")
        assert "arms" in excinfo.value.key

    def test_prerouting_new_dst_needs_port(self):
        text = MINIMAL_TOPOLOGY.replace(
            "          subnet: 192.168.7.0/24\n",
            "          subnet: 192.168.7.0/24\n"
            "      prerouting:\n"
            "        - match_dst_port: 5064\n"
            "          new_dst: 255.255.255.255\n",
            1,
        )
        with pytest.raises(ValidationError) as excinfo:
            parse_config(text)
        assert "new_dst" in excinfo.value.key


class TestDefaults:
    def test_client_defaults(self):
        config = parse_config("")
        assert config.client.initial_retry_s == 0.030
        assert config.client.backoff_factor == 2.0
        assert config.client.max_tries == 5

    def test_bench_defaults(self):
        config = parse_config("")
        assert config.bench.repetitions == 100
        assert config.bench.arms == ("DIRECT", "PERSISTENT", "FORK_MODEL")

    def test_relay_defaults(self):
        config = parse_config("relay:\n  target_broadcast: 255.255.255.255\n")
        assert config.relay.listen_port == 6064
        assert config.relay.target_port == 5064
        assert config.relay.flow_idle_timeout_s == 30.0


def test_install_relay_prerouting_adds_redirect():
    config = parse_config((CONFIG_DIR / "scenario_c.yaml").read_text())
    host1 = next(h for h in config.topology.hosts if h.name == "IMX1-HOST1")
    assert host1.prerouting_rules == []
    install_relay_prerouting(config)
    (rule,) = host1.prerouting_rules
    assert rule.match_dst_port == 5064
    assert rule.new_dst_ip == "10.2.1.31"
    assert rule.new_dst_port == 6064
    assert rule.negate_src == Cidr("10.2.1.0", 24)
