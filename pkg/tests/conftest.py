import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vinkit import manifold as mf
from vinkit.imu import ImuState, ImuStream

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)


@st.composite
def rotation_vectors(draw, max_angle: float = 3.0):
    axis = draw(arrays(np.float64, 3, elements=st.floats(-1.0, 1.0)))
    n = np.linalg.norm(axis)
    if n < 1e-3:
        axis, n = np.array([0.0, 0.0, 1.0]), 1.0
    return axis / n * draw(st.floats(0.0, max_angle))


@st.composite
def quaternions(draw):
    return mf.quat_exp(draw(rotation_vectors()))


@st.composite
def imu_states(draw):
    small = st.floats(-0.1, 0.1)
    return ImuState(
        draw(vec3),
        draw(quaternions()),
        draw(arrays(np.float64, 3, elements=st.floats(-5.0, 5.0))),
        draw(arrays(np.float64, 3, elements=small)),
        draw(arrays(np.float64, 3, elements=small)),
    )


@st.composite
def tangents(draw, scale: float = 0.5):
    return draw(arrays(np.float64, 15, elements=st.floats(-scale, scale)))


def random_state(rng: np.random.Generator, scale: float = 1.0) -> ImuState:
    return ImuState(
        scale * rng.normal(size=3),
        mf.quat_exp(rng.normal(size=3)),
        rng.normal(size=3),
        0.01 * rng.normal(size=3),
        0.1 * rng.normal(size=3),
    )


def random_stream(rng: np.random.Generator, n: int = 200, rate: float = 200.0) -> ImuStream:
    t = np.arange(n + 1) / rate
    return ImuStream(t, 0.5 * rng.normal(size=(n + 1, 3)), np.array([0.0, 0.0, 9.81]) + rng.normal(size=(n + 1, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
