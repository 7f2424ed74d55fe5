import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from vinkit import sim
from vinkit.camera import observe
from vinkit.errors import ContractViolation
from vinkit.imu import NoiseParams, propagate

QUIET = NoiseParams(0.0, 0.0, 0.0, 0.0)


def quiet_scenario(**kw):
    base = dict(noise=QUIET, pixel_noise=0.0)
    base.update(kw)
    return sim.Scenario(**base)


@pytest.mark.parametrize("family", sim.FAMILIES)
def test_zero_noise_stream_reproduces_truth(family):
    data = sim.generate(quiet_scenario(trajectory=sim.AnalyticTrajectory(family=family), duration=10.0, n_landmarks=5))
    x = propagate(data.truth[0], data.imu, QUIET)
    assert np.linalg.norm(x.t - data.truth[-1].t) < 1e-6
    assert np.max(np.abs(x.boxminus(data.truth[-1]))) < 1e-6


def test_truth_matches_closed_form_at_samples():
    traj = sim.AnalyticTrajectory()
    data = sim.generate(quiet_scenario(trajectory=traj, duration=2.0, n_landmarks=5))
    for i in range(0, len(data.truth), 40):
        t = data.imu.t[i]
        assert_allclose(data.truth[i].R, traj.rotation(t), atol=1e-12)
        assert_allclose(data.truth[i].v, traj.velocity(t), atol=1e-12)
        # positions follow the held-input integration, within a few micrometres of the curve
        assert np.linalg.norm(data.truth[i].t - traj.position(t)) < 1e-5


def test_zero_noise_features_equal_observe():
    sc = quiet_scenario(duration=1.0, n_landmarks=200, camera=sim.default_camera())
    data = sim.generate(sc)
    n = 0
    for k, feats in zip(data.frame_sample_index, data.features):
        for j, px in feats:
            assert_array_equal(px, observe(data.truth[k], data.landmarks[j], sc.camera, distorted=True))
            assert sc.camera.in_image(px)
            n += 1
    assert n > 100


def test_features_with_distortion_equal_observe():
    from vinkit.camera import CameraModel, FORWARD_LOOKING_R_CI

    model = CameraModel(400.0, 400.0, 320.0, 240.0, 640, 480, k=[-0.05, 0.01, 0, 0, 0, 0], p=[1e-4, -1e-4], R_CI=FORWARD_LOOKING_R_CI)
    data = sim.generate(quiet_scenario(duration=0.5, n_landmarks=100, camera=model))
    for k, feats in zip(data.frame_sample_index, data.features):
        for j, px in feats:
            assert_array_equal(px, observe(data.truth[k], data.landmarks[j], model, distorted=True))


def test_same_seed_is_bitwise_identical():
    sc = sim.Scenario(duration=1.0, seed=11, n_landmarks=50)
    a, b = sim.generate(sc), sim.generate(sc)
    assert_array_equal(a.imu.gyro, b.imu.gyro)
    assert_array_equal(a.imu.accel, b.imu.accel)
    assert_array_equal(a.timestamps_ns, b.timestamps_ns)
    assert [[(j, px.tobytes()) for j, px in f] for f in a.features] == [[(j, px.tobytes()) for j, px in f] for f in b.features]
    assert all(np.array_equal(x.to_vector(), y.to_vector()) for x, y in zip(a.truth, b.truth))


def test_different_seeds_differ():
    a = sim.generate(sim.Scenario(duration=0.5, seed=1, n_landmarks=10))
    b = sim.generate(sim.Scenario(duration=0.5, seed=2, n_landmarks=10))
    assert not np.array_equal(a.imu.gyro, b.imu.gyro)


def test_timestamps_and_frame_schedule():
    data = sim.generate(quiet_scenario(duration=1.0, n_landmarks=5))
    assert data.timestamps_ns[1] == 5_000_000
    assert len(data.imu) == 201
    assert_array_equal(data.frame_sample_index, np.arange(0, 201, 10))


@pytest.mark.parametrize("imu_rate, camera_rate", [(200, 30), (10, 20), (300, 20)])
def test_rate_validation(imu_rate, camera_rate):
    with pytest.raises(ContractViolation):
        sim.Scenario(imu_rate=imu_rate, camera_rate=camera_rate)


def test_landmarks_lie_in_the_shell_around_the_path():
    sc = sim.Scenario(duration=5.0, n_landmarks=100)
    data = sim.generate(sc)
    path = np.array([sc.trajectory.position(t) for t in np.linspace(0.0, 5.0, 2001)])
    for L in data.landmarks.values():
        assert np.min(np.linalg.norm(path - L, axis=1)) <= sc.shell[1] + 1e-9


def test_hover_specific_force():
    traj = sim.AnalyticTrajectory(rate=0.0, attitude="fixed")
    assert_allclose(sim.true_specific_force(traj, 1.3), [0.0, 0.0, 9.81], atol=1e-15)
    assert_array_equal(traj.angular_velocity(2.0), np.zeros(3))


def test_circle_centripetal_acceleration():
    traj = sim.AnalyticTrajectory(radius=5.0, rate=0.5)
    for t in (0.0, 0.7, 3.1):
        f = sim.true_specific_force(traj, t)
        # yaw-only attitude keeps the horizontal magnitude; the vertical bob only changes z
        assert math.isclose(np.linalg.norm(f[:2]), 5.0 * 0.25, rel_tol=1e-12)


@pytest.mark.parametrize("family", sim.FAMILIES)
def test_specific_force_against_finite_differences(family):
    traj = sim.AnalyticTrajectory(family=family)
    h = 1e-3
    for t in (0.4, 2.2, 5.9):
        dv = (traj.velocity(t - 2 * h) - 8 * traj.velocity(t - h) + 8 * traj.velocity(t + h) - traj.velocity(t + 2 * h)) / (12 * h)
        expected = traj.rotation(t).T @ (dv + np.array([0.0, 0.0, 9.81]))
        assert np.max(np.abs(sim.true_specific_force(traj, t) - expected)) < 1e-8


def test_trajectory_rejects_unknown_family():
    with pytest.raises(ContractViolation):
        sim.AnalyticTrajectory(family="spiral")


def test_bias_random_walk_statistics():
    # bias increments are the only noise source, so their spread is checkable directly
    noise = NoiseParams(0.0, 0.0, 1e-3, 1e-2)
    sc = sim.Scenario(duration=50.0, noise=noise, pixel_noise=0.0, n_landmarks=1, camera_rate=1)
    ref = sim.generate(quiet_scenario(duration=50.0, n_landmarks=1, camera_rate=1))
    data = sim.generate(sc)
    bg = data.imu.gyro - ref.imu.gyro
    ba = data.imu.accel - ref.imu.accel
    dt = 0.005
    assert_allclose(np.diff(bg, axis=0).std(), 1e-3 * math.sqrt(dt), rtol=0.05)
    assert_allclose(np.diff(ba, axis=0).std(), 1e-2 * math.sqrt(dt), rtol=0.05)
    assert_array_equal(bg[0], np.zeros(3))
    assert_allclose(data.truth[-1].bg, bg[-1], atol=1e-12)


def test_imu_noise_statistics_over_a_million_draws():
    # hovering sensor: the clean readings are (0, 0, 0) and (0, 0, g), so the
    # emitted values minus those are the noise draws (166 667 samples x 6 channels)
    rate = 1000
    noise = NoiseParams(1e-3, 1e-2, 0.0, 0.0)
    hover = sim.AnalyticTrajectory(rate=0.0, attitude="fixed")
    data = sim.generate(sim.Scenario(trajectory=hover, noise=noise, pixel_noise=0.0, imu_rate=rate, camera_rate=1, duration=166.667, n_landmarks=1))
    eg = data.imu.gyro.ravel()
    ea = (data.imu.accel - np.array([0.0, 0.0, 9.81])).ravel()
    assert eg.size + ea.size >= 1_000_000
    sg, sa = noise.discrete_std(1.0 / rate)
    assert abs(eg.std() / sg - 1.0) < 0.05
    assert abs(ea.std() / sa - 1.0) < 0.05
    assert abs(eg.mean()) < 5 * sg / math.sqrt(eg.size)


def test_pixel_noise_statistics():
    sc = sim.Scenario(duration=2.0, noise=QUIET, pixel_noise=1.5, n_landmarks=400, seed=4)
    data = sim.generate(sc)
    ref = sim.generate(quiet_scenario(duration=2.0, n_landmarks=400, seed=4))
    d = np.array([
        px - dict(fr)[j] for f, fr in zip(data.features, ref.features) for j, px in f if j in dict(fr)
    ])
    assert len(d) > 2000
    assert abs(d.std() / 1.5 - 1.0) < 0.05
