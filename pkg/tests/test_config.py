"""Config parsing, validation messages and round-trips."""

from dataclasses import asdict, fields

import pytest
from hypothesis import given
from hypothesis import strategies as st

from softq.config import (ConfigError, ExperimentConfig, parse_config, parse_config_text, reference_text,
                          serialize_config)


class TestParse:
    def test_minimal_gets_defaults(self, tmp_path):
        path = tmp_path / "m.ini"
        path.write_text("[experiment]\nalgorithm = SQN\nenv = chain\n")
        cfg = parse_config(path)
        assert (cfg.algorithm, cfg.env) == ("SQN", "chain")
        expected = asdict(ExperimentConfig(algorithm="SQN", env="chain"))
        assert asdict(cfg) == expected

    def test_gamma_one_rejected(self):
        with pytest.raises(ConfigError, match=r"x\.ini:3: gamma"):
            parse_config_text("[agent]\nn = 2\ngamma = 1.0\n", "x.ini")

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError, match="'gama'.*did you mean 'gamma'"):
            parse_config_text("[agent]\ngama = 0.5\n", "x.ini")

    def test_key_in_wrong_section(self):
        with pytest.raises(ConfigError, match=r"belongs in section \[agent\]"):
            parse_config_text("[harness]\ngamma = 0.5\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text("[agnet]\ngamma = 0.5\n")

    def test_malformed(self):
        with pytest.raises(ConfigError, match="malformed"):
            parse_config_text("gamma = 0.5\n", "x.ini")

    def test_bad_value_named(self):
        with pytest.raises(ConfigError, match=r"x\.ini:2: n: cannot parse"):
            parse_config_text("[agent]\nn = four\n", "x.ini")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.ini"):
            parse_config(tmp_path / "nope.ini")

    @pytest.mark.parametrize("key,value", [("tau", "1.5"), ("n", "0"), ("alpha", "0"), ("alpha", "-1"),
                                           ("gamma", "-0.1")])
    def test_range_rules(self, key, value):
        with pytest.raises(ConfigError, match=key):
            parse_config_text(f"[agent]\n{key} = {value}\n")

    def test_hidden_sizes_and_case(self):
        cfg = parse_config_text("[experiment]\nalgorithm = qop\n[agent]\nhidden_sizes = 32, 16\n")
        assert cfg.algorithm == "QOP" and cfg.hidden_sizes == (32, 16)

    def test_shipped_configs_parse(self):
        from pathlib import Path
        for path in sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.ini")):
            parse_config(path)


class TestRoundTrip:
    def test_reference_is_defaults(self):
        assert parse_config_text(reference_text()) == ExperimentConfig()
        assert all(f"{f.name} =" in reference_text() for f in fields(ExperimentConfig))

    @given(
        st.sampled_from(["SQN", "SQN_CF", "QOP"]),
        st.sampled_from(["gridworld", "chain", "random_mdp", "grid_soccer"]),
        st.floats(0.0, 0.999),
        st.floats(1e-6, 1e3),
        st.integers(1, 16),
        st.lists(st.integers(1, 256), max_size=3),
        st.booleans(),
    )
    def test_parse_serialize_parse(self, alg, env, gamma, alpha, n, hidden, selfplay):
        cfg = ExperimentConfig(algorithm=alg, env=env, gamma=gamma, alpha=alpha, n=n, hidden_sizes=tuple(hidden),
                               selfplay=selfplay).validate()
        again = parse_config_text(serialize_config(cfg))
        assert again == cfg
        assert parse_config_text(serialize_config(cfg, only_changed=True)) == cfg
