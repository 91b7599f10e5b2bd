import json
from pathlib import Path

import pytest

from densplan.config import Config, config_from_dict, load_config
from densplan.errors import ConfigError
from densplan.scenario import car_template

DEMO = Path(__file__).resolve().parents[1] / "configs" / "demo_car.json"


def test_default_config_matches_car_template():
    sc = Config().build_scenario()
    ref = car_template()
    assert (sc.q_origin == ref.q_origin).all() and (sc.q_dest == ref.q_dest).all()
    assert sc.horizon_steps == ref.horizon_steps and sc.n_segments == ref.n_segments and sc.gamma == ref.gamma


def test_demo_config_loads():
    cfg = load_config(DEMO)
    sc = cfg.build_scenario()
    assert len(sc.obstacles) == 2 and sc.obstacles[0].radius == pytest.approx(0.7)


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"scenario": {"bogus": 1}},
    {"scenario": {"init_error": {"nope": 0.1}}},
    {"scenario": {"obstacles": [{"center_m": [1, 2], "radius_m": 0.5, "extra": 1}]}},
    {"scenario": {"obstacles": [{"center_m": [1, 2]}]}},
    {"scenario": {"horizon_steps": "many"}},
    {"scenario": {"gamma": 0.0}},
    {"planner": {"resolution": 4}},
    {"bench": {"variants": ["nonsense"]}},
    {"model": {"n_traj": 0}},
    {"schema_version": 99},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_digest_stable_and_sensitive():
    a = config_from_dict({"scenario": {"gamma": 1e-4}})
    assert a.digest() == Config().digest() == config_from_dict(json.loads(json.dumps(a.to_dict()))).digest()
    assert len(a.digest()) == 16
    assert config_from_dict({"scenario": {"gamma": 2e-4}}).digest() != a.digest()


def test_planner_perturbation_range_follows_model():
    car = config_from_dict({"planner": {"perturb_v_mps": 0.5}}).planner_config()
    assert car.perturb_range == (0.5, 1.0)
    hov = config_from_dict({"scenario": {"model": "hovercraft", "origin_pos_m": [1, 5, 5],
                                         "dest_pos_m": [9, 5, 5], "workspace_lo_m": [0, 0, 0],
                                         "workspace_hi_m": [10, 10, 10]}}).planner_config()
    assert len(hov.perturb_range) == 3
