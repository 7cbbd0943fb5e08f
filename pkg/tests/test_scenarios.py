import copy

import pytest
import yaml

from mixflow.model import validate_scenario
from mixflow.scenarios import BUILTIN_NAMES, ConfigError, builtin, load_config, parse_config

BASE = {
    "name": "t",
    "horizon": 1.0,
    "components": [{"kind": "constant", "c": 2.0, "weight": 1.0, "sigma": {"kind": "uniform"}}],
    "grid": {"n_t": 17, "n_z": 9},
}


def edited(**kw):
    raw = copy.deepcopy(BASE)
    raw.update(kw)
    return raw


def test_parse_minimal():
    sc = parse_config(copy.deepcopy(BASE))
    assert sc.name == "t" and sc.grid.n_t == 17 and sc.mixture.M_W == 2.0
    assert sc.tol == 1e-8 and sc.mc_seed == 20240611


@pytest.mark.parametrize("raw", [
    [1, 2],
    edited(components=[]),
    edited(components=["x"]),
    edited(grid={"n_t": 17, "n_z": 9, "n_b": 9}),
    edited(grid={"n_t": 1, "n_z": 9}),
    edited(components=[{"kind": "spline", "weight": 1.0}]),
])
def test_shape_errors(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_missing_horizon():
    raw = copy.deepcopy(BASE)
    del raw["horizon"]
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_load_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(BASE))
    assert load_config(p).digest() == parse_config(copy.deepcopy(BASE)).digest()


def test_load_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("horizon: [1.0\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_digest_changes():
    assert parse_config(copy.deepcopy(BASE)).digest() != parse_config(edited(horizon=2.0)).digest()


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_validate(name):
    sc = builtin(name, 17, 17)
    assert validate_scenario(sc.mixture, sc.density).ok


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_shipped_configs_match_builtins(name):
    raw, ref = load_config(f"configs/{name}.yaml").raw, builtin(name).raw
    assert raw["horizon"] == ref["horizon"] and raw["components"] == ref["components"]
