import numpy as np
import pytest
from numpy.testing import assert_array_equal

from vinkit import io
from vinkit.camera import CameraModel, FORWARD_LOOKING_R_CI
from vinkit.config import parse_camera
from vinkit.errors import DataFormatError

from conftest import random_state, random_stream


def test_imu_round_trip_is_exact(tmp_path, rng):
    s = random_stream(rng, n=50)
    ts = np.arange(51, dtype=np.int64) * 5_000_000
    io.write_imu_csv(tmp_path / "imu.csv", ts, s)
    ts2, s2 = io.read_imu_csv(tmp_path / "imu.csv")
    assert_array_equal(ts2, ts)
    assert_array_equal(s2.gyro, s.gyro)
    assert_array_equal(s2.accel, s.accel)


def test_trajectory_round_trip_with_variances(tmp_path, rng):
    states = [random_state(rng) for _ in range(5)]
    covs = [np.diag(rng.uniform(0.1, 1.0, 15)) for _ in states]
    io.write_trajectory_csv(tmp_path / "t.csv", range(5), states, covs)
    ts, back, var = io.read_trajectory_csv(tmp_path / "t.csv")
    assert list(ts) == list(range(5))
    for a, b in zip(states, back):
        assert_array_equal(a.to_vector(), b.to_vector())
    assert_array_equal(var, np.array([np.diag(c) for c in covs]))


def test_trajectory_without_variances(tmp_path, rng):
    io.write_trajectory_csv(tmp_path / "t.csv", [7], [random_state(rng)])
    assert io.read_trajectory_csv(tmp_path / "t.csv")[2] is None


def test_covariance_round_trip_is_symmetric(tmp_path, rng):
    A = rng.normal(size=(15, 15))
    P = A @ A.T
    io.write_covariance_csv(tmp_path / "c.csv", [1, 2], [P, 2 * P])
    ts, covs = io.read_covariance_csv(tmp_path / "c.csv")
    assert list(ts) == [1, 2]
    assert_array_equal(covs[0], np.triu(P) + np.triu(P, 1).T)


def test_features_group_into_frames(tmp_path):
    frames = [io.Frame(0, 100, {3: np.array([1.5, 2.5])}), io.Frame(1, 200, {}), io.Frame(2, 300, {3: np.array([4.0, 5.0]), 9: np.array([6.0, 7.0])})]
    io.write_features_csv(tmp_path / "f.csv", frames)
    back = io.read_features_csv(tmp_path / "f.csv", [100, 200, 300])
    assert [f.frame_id for f in back] == [0, 1, 2]
    assert back[1].observations == {}
    assert_array_equal(back[2].observations[9], [6.0, 7.0])
    # without the frame list an empty frame cannot be recovered
    assert [f.frame_id for f in io.read_features_csv(tmp_path / "f.csv")] == [0, 2]


def test_landmarks_and_camera_round_trip(tmp_path):
    lms = {5: np.array([1.0, 2.0, 3.0]), 1: np.array([-1.0, 0.5, 0.25])}
    io.write_landmarks_csv(tmp_path / "l.csv", lms)
    back = io.read_landmarks_csv(tmp_path / "l.csv")
    assert sorted(back) == [1, 5]
    assert_array_equal(back[5], lms[5])
    model = CameraModel(400.0, 410.0, 320.0, 240.0, 640, 480, k=[-0.05, 0.01, 0, 0, 0, 0], p=[1e-4, -1e-4], R_CI=FORWARD_LOOKING_R_CI, sigma_px=0.7)
    io.write_json(tmp_path / "camera.json", io.camera_to_dict(model))
    again = parse_camera(io.read_json(tmp_path / "camera.json"))
    assert np.allclose(again.R_CI, model.R_CI, atol=1e-15)
    assert again.fy == 410.0 and again.sigma_px == 0.7
    assert_array_equal(again.k, model.k)


@pytest.mark.parametrize(
    "content",
    [
        "",
        "time,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n",
        "timestamp_ns,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0\n",
        "timestamp_ns,wx,wy,wz,ax,ay,az\n0,a,0,0,0,0,9.81\n",
        "timestamp_ns,wx,wy,wz,ax,ay,az\n5,0,0,0,0,0,9.81\n5,0,0,0,0,0,9.81\n",
        "timestamp_ns,wx,wy,wz,ax,ay,az\n",
    ],
)
def test_malformed_imu_files_are_rejected(tmp_path, content):
    (tmp_path / "imu.csv").write_text(content)
    with pytest.raises(DataFormatError):
        io.read_imu_csv(tmp_path / "imu.csv")


def test_inconsistent_feature_timestamps_are_rejected(tmp_path):
    (tmp_path / "f.csv").write_text("timestamp_ns,frame_id,landmark_id,u_px,v_px\n100,0,1,1,1\n101,0,2,1,1\n")
    with pytest.raises(DataFormatError):
        io.read_features_csv(tmp_path / "f.csv")


def test_unexpected_trajectory_columns_are_rejected(tmp_path, rng):
    io.write_trajectory_csv(tmp_path / "t.csv", [0], [random_state(rng)])
    text = (tmp_path / "t.csv").read_text().splitlines()
    (tmp_path / "t.csv").write_text(text[0] + ",extra\n" + text[1] + ",1\n")
    with pytest.raises(DataFormatError):
        io.read_trajectory_csv(tmp_path / "t.csv")


def test_invalid_json_is_a_data_error(tmp_path):
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(DataFormatError):
        io.read_json(tmp_path / "x.json")


def test_json_output_is_sorted_and_plain(tmp_path):
    io.write_json(tmp_path / "m.json", {"b": np.float64(1.5), "a": np.arange(2), "c": float("nan")})
    assert (tmp_path / "m.json").read_text() == '{\n  "a": [\n    0,\n    1\n  ],\n  "b": 1.5,\n  "c": null\n}\n'
