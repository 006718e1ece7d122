import json
import math

import pytest

from polqkd.config import Config, ConfigError, dump_config, effective_transmittance, from_dict, load_config


def test_defaults_validate():
    cfg = Config().validate()
    assert cfg.protocol.blocks_per_pa == 1000
    assert cfg.detector.double_click == "discard"


def test_roundtrip_json():
    cfg = Config().replace(fiber_length=120.0, mu1=0.4, dark_rate=25.0)
    again = load_config(dump_config(cfg))
    assert again == cfg


def test_partial_json_uses_defaults():
    cfg = load_config('{"fiber_length": 75, "efficiency": 0.2}')
    assert cfg.channel.fiber_length == 75.0
    assert cfg.detector.efficiency == 0.2
    assert cfg.protocol.mu1 == Config().protocol.mu1


@pytest.mark.parametrize(
    "data, field",
    [
        ({"mu1": 0.1, "mu2": 0.2}, "mu1"),
        ({"mu2": 0.0}, "mu2"),
        ({"p_mu1": 1.0}, "p_mu1"),
        ({"p_x_bob": 0.0}, "p_x_bob"),
        ({"efficiency": 1.5}, "efficiency"),
        ({"dark_rate": -1}, "dark_rate"),
        ({"n_z_pa": 10000}, "n_z_pa"),
        ({"n_z_ec": 4, "n_z_pa": 8}, "n_z_ec"),
        ({"fiber_length": -3}, "fiber_length"),
        ({"double_click": "keep"}, "double_click"),
        ({"cascade_schedule": "ldpc"}, "cascade_schedule"),
        ({"step_min": 1.0}, "step_min"),
    ],
)
def test_invalid_values_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field):
        from_dict(data)


def test_unknown_key_and_bad_types():
    with pytest.raises(ConfigError, match="unknown"):
        from_dict({"speed_of_light": 3e8})
    with pytest.raises(ConfigError, match="integer"):
        from_dict({"n_z_ec": 8192.5})
    with pytest.raises(ConfigError, match="number"):
        from_dict({"mu1": "0.3"})
    with pytest.raises(ConfigError, match="true/false"):
        from_dict({"enabled": 1})
    with pytest.raises(ConfigError, match="malformed"):
        load_config("{not json")
    with pytest.raises(ConfigError):
        load_config("[1, 2]")


def test_replace_rejects_unknown():
    with pytest.raises(ConfigError):
        Config().replace(nope=1)


@pytest.mark.parametrize("km, expected", [(100, 1e-2), (200, 1e-4), (0, 1.0)])
def test_transmittance_without_insertion_loss(km, expected):
    ch = Config().replace(fiber_length=km, extra_loss=0.0).channel
    assert math.isclose(effective_transmittance(ch), expected, rel_tol=1e-12)


def test_insertion_loss_adds_in_db():
    ch = Config().replace(fiber_length=50, extra_loss=3.0).channel
    assert math.isclose(effective_transmittance(ch), 10 ** (-1.3), rel_tol=1e-12)


def test_extinction_floor():
    assert math.isclose(Config().replace(pbs_extinction=20.0).detector.extinction_floor, 0.01)
    assert math.isclose(Config().replace(pbs_extinction=30.0).detector.extinction_floor, 0.001)


def test_dump_is_flat_and_sorted():
    data = json.loads(dump_config(Config()))
    assert list(data) == sorted(data)
    assert "mu1" in data and "eps_sec" in data
