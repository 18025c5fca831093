import numpy as np
import pytest
from hypothesis import strategies as st

from segloc.core import Config, FrameFeatures, ModelParams, init_params, new_rng


def rng_params(seed: int, d: int) -> ModelParams:
    return init_params(d, new_rng(seed))


@st.composite
def video_instances(draw, max_frames=10, max_dim=8):
    """A random (features, query, params) triple with matching dimension."""
    n = draw(st.integers(min_value=1, max_value=max_frames))
    d = draw(st.integers(min_value=2, max_value=max_dim))
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    rng = np.random.default_rng(seed)
    feats = FrameFeatures(f"hv{seed % 997}", rng.standard_normal((n, d)))
    q = rng.standard_normal(d)
    params = init_params(d, rng)
    return feats, q, params


@st.composite
def spans_in(draw, n_frames: int):
    s = draw(st.integers(min_value=0, max_value=n_frames - 1))
    e = draw(st.integers(min_value=s, max_value=n_frames - 1))
    return (s, e)


@pytest.fixture
def default_cfg():
    return Config()


@pytest.fixture
def tiny_instance():
    rng = np.random.default_rng(7)
    feats = FrameFeatures("tiny", rng.standard_normal((6, 4)))
    q = rng.standard_normal(4)
    params = init_params(4, rng)
    return feats, q, params
