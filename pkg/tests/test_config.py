from pathlib import Path

import numpy as np
import pytest

from dime import config as cfgmod
from dime.config import ConfigError, TradeOffGrid

CONFIGS = sorted((Path(__file__).parents[1] / "configs").glob("*.yaml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_round_trip(path):
    cfg = cfgmod.load(path)
    again = cfgmod.loads(cfgmod.dumps(cfg))
    assert again == cfg
    assert cfgmod.config_hash(again) == cfgmod.config_hash(cfg)


def test_defaults_round_trip():
    cfg = cfgmod.from_dict({})
    assert cfgmod.from_dict(cfgmod.to_dict(cfg)) == cfg


def test_hash_sensitivity():
    a = cfgmod.from_dict({"iterations": 10})
    b = cfgmod.from_dict({"iterations": 11})
    assert cfgmod.config_hash(a) != cfgmod.config_hash(b)
    assert cfgmod.config_hash(a) == cfgmod.config_hash(cfgmod.from_dict({"iterations": 10}))
    assert len(cfgmod.config_hash(a)) == 12


@pytest.mark.parametrize(
    "data",
    [
        {"iteratons": 10},
        {"task": {"nmae": "schaffer"}},
        {"tradeoffs": {"kind": "linspace", "step": 0.1}},
        {"kickstart": {"prior": {"mean": [0.0], "std": 1.0}}},
        {"improvement": {"epsilon_typo": 0.1}},
    ],
)
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown"):
        cfgmod.from_dict(data)


@pytest.mark.parametrize(
    "data",
    [
        {"method": "nope"},
        {"task": {"kind": "atari"}},
        {"task": {"name": "nope"}},
        {"tradeoffs": {"kind": "list", "values": [1.5]}},
        {"tradeoffs": {"count": 0}},
        {"seeds": []},
        {"iterations": -1},
        {"batch_size": 0},
        {"offline": {"methods": ["dime"]}},
        {"offline": {"behavior": [[0.5, 0.0, 1.0]]}},
        {"kickstart": {"fixed_alphas": [2.0]}},
        {"conditioned": {"degree": 0}},
        {"task": 3},
    ],
)
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        cfgmod.from_dict(data)


def test_invalid_yaml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.loads("task: [unclosed")
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        cfgmod.loads("- a list")


class TestGrid:
    def test_linspace(self):
        np.testing.assert_array_equal(TradeOffGrid("linspace", 0.0, 1.0, 5).alphas(), [0, 0.25, 0.5, 0.75, 1])

    def test_list(self):
        np.testing.assert_array_equal(TradeOffGrid("list", values=(0.2, 0.9)).alphas(), [0.2, 0.9])

    def test_cubic_matches_formula(self):
        g = TradeOffGrid("cubic", 0.0, 1.0, 5, linear_weight=0.3)
        u = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
        np.testing.assert_allclose(g.alphas(), 0.5 + 0.5 * (0.3 * u + 0.7 * u**3), atol=1e-15)

    def test_cubic_endpoints_and_symmetry(self):
        a = TradeOffGrid("cubic", 0.1, 0.9, 21, linear_weight=0.3).alphas()
        assert a[0] == pytest.approx(0.1) and a[-1] == pytest.approx(0.9)
        np.testing.assert_allclose(a + a[::-1], 1.0, atol=1e-12)
        # Denser in the middle than at the ends.
        d = np.diff(a)
        assert d[10] < d[0]

    def test_cubic_unit_weight_is_linspace(self):
        np.testing.assert_allclose(
            TradeOffGrid("cubic", 0.2, 0.8, 7, linear_weight=1.0).alphas(), np.linspace(0.2, 0.8, 7), atol=1e-15
        )

    def test_tradeoffs_complement(self):
        ts = TradeOffGrid("linspace", 0.0, 1.0, 3).tradeoffs()
        assert [t.weights for t in ts] == [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]


def test_method_config_override():
    cfg = cfgmod.from_dict({"method": "dime", "batch_size": 7})
    mc = cfg.method_config("ls")
    assert mc.improvement.mode == "ls"
    assert mc.batch_size == 7
