import json
from pathlib import Path

import pytest

from vinkit.config import load_config, parse_config
from vinkit.errors import ConfigError

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.scenario is not None
    assert cfg.scenario.seed == cfg.seed


def test_defaults():
    cfg = parse_config({})
    assert cfg.scenario is None
    assert cfg.run.estimator == "smoother" and cfg.run.window_keyframes == 7
    assert cfg.evaluate.alignment == "four_dof"
    assert cfg.run.gate == pytest.approx(13.815510557964274)


def test_overrides_are_applied():
    cfg = parse_config({
        "seed": 4,
        "scenario": {"trajectory": {"family": "figure-eight", "radius": 3.0}, "duration": 2.5, "landmarks": {"count": 10}},
        "run": {"estimator": "filter", "iterated": True, "huber": None, "noise": {"sigma_g": 0.002}},
    })
    assert cfg.scenario.trajectory.family == "figure-eight"
    assert cfg.scenario.trajectory.radius == 3.0
    assert cfg.scenario.n_landmarks == 10 and cfg.scenario.seed == 4
    assert cfg.run.iterated and cfg.run.huber is None
    assert cfg.run.noise.sigma_g == 0.002 and cfg.run.seed == 4


@pytest.mark.parametrize(
    "doc, key",
    [
        ({"bogus": 1}, "bogus"),
        ({"run": {"estimator": "ukf"}}, "run.estimator"),
        ({"run": {"integrator": "heun"}}, "run.integrator"),
        ({"run": {"window_keyframes": 1}}, "run.window_keyframes"),
        ({"run": {"max_iters": "many"}}, "run.max_iters"),
        ({"run": {"iterated": 1}}, "run.iterated"),
        ({"run": {"gate_probability": 1.5}}, "run.gate_probability"),
        ({"run": {"initial_std": {"heading": 1.0}}}, "run.initial_std.heading"),
        ({"scenario": {"trajectory": {"family": "spiral"}}}, "scenario.trajectory.family"),
        ({"scenario": {"noise": {"sigma_g": -1.0}}}, "scenario.noise.sigma_g"),
        ({"scenario": {"camera": {"fx": 0.0}}}, "scenario.camera.fx"),
        ({"scenario": {"camera": {"k": [0.1]}}}, "scenario.camera.k"),
        ({"scenario": {"imu_rate": 200, "camera_rate": 30}}, "scenario.camera_rate"),
        ({"scenario": {"duration": 0}}, "scenario.duration"),
        ({"scenario": {"landmarks": {"shell": [5.0, 2.0]}}}, "scenario.landmarks.shell"),
        ({"evaluate": {"alignment": "sim3"}}, "evaluate.alignment"),
        ({"evaluate": {"rpe_delta": -1}}, "evaluate.rpe_delta"),
    ],
)
def test_errors_name_the_offending_key(doc, key):
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert err.value.key == key


def test_unreadable_json_is_a_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_round_trips_through_json(tmp_path):
    doc = json.loads(CONFIGS[0].read_text())
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    assert load_config(p).raw == doc
