import json

import pytest

from vinkit import cli, pipeline
from vinkit.errors import EstimatorDiverged


def write_config(path, **run):
    doc = {
        "seed": 5,
        "scenario": {"trajectory": {"family": "circle"}, "duration": 1.5, "landmarks": {"count": 150}},
        "run": {"estimator": "smoother", **run},
    }
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    assert cli.main(["simulate", "--config", cfg, "--out", str(root / "data")]) == 0
    return root


@pytest.mark.parametrize("estimator", ["smoother", "filter"])
def test_simulate_run_evaluate_pipeline(dataset, estimator, capsys):
    out = dataset / f"run_{estimator}"
    assert cli.main(["run", "--data", str(dataset / "data"), "--out", str(out), "--estimator", estimator]) == 0
    assert (out / "trajectory.csv").is_file() and (out / "covariance.csv").is_file()
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["estimator"] == estimator
    ev = dataset / f"eval_{estimator}"
    assert cli.main(["evaluate", "--estimate", str(out), "--groundtruth", str(dataset / "data"), "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert 0.0 <= metrics["ate_rmse_m"] < 0.5
    assert metrics["avg_nees"] is not None
    assert (ev / "errors.csv").is_file() and (ev / "rpe.csv").is_file()
    assert "ate_rmse_m" in capsys.readouterr().out


def test_metric_flag_selects_printed_values(dataset, capsys):
    out = dataset / "run_metric"
    cli.main(["run", "--data", str(dataset / "data"), "--out", str(out), "--estimator", "filter"])
    capsys.readouterr()
    cli.main(["evaluate", "--estimate", str(out), "--groundtruth", str(dataset / "data"), "--out", str(dataset / "m"), "--metric", "rpe"])
    printed = capsys.readouterr().out
    assert "rpe_trans_rmse" in printed and "ate_rmse_m" not in printed


def test_run_twice_is_byte_identical(dataset):
    a, b = dataset / "det_a", dataset / "det_b"
    for d in (a, b):
        assert cli.main(["run", "--data", str(dataset / "data"), "--out", str(d), "--seed", "3"]) == 0
    for name in ("trajectory.csv", "covariance.csv", "diagnostics.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_bad_config_key_is_a_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"scenario": {"duration": 1.0, "colour": "red"}}))
    assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path / "d")]) == 2
    assert "scenario.colour" in capsys.readouterr().err


def test_missing_dataset_is_an_io_error(tmp_path):
    assert cli.main(["run", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3


def test_divergence_has_its_own_exit_code(dataset, monkeypatch):
    def boom(ds, cfg):
        raise EstimatorDiverged("non-finite state")

    monkeypatch.setattr(pipeline, "run_estimator", boom)
    assert cli.main(["run", "--data", str(dataset / "data"), "--out", str(dataset / "x")]) == 4


def test_unknown_subcommand_exits_with_usage_error():
    with pytest.raises(SystemExit) as err:
        cli.main(["fly"])
    assert err.value.code == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    assert "checks passed" in capsys.readouterr().out
