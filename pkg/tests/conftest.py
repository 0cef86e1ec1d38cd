import numpy as np
import pytest

from ssp.dataset import VideoData
from ssp.synth import SceneConfig, generate_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_seq():
    return generate_sequence(SceneConfig(height=32, width=32, num_frames=6, num_sprites=1, sprite_size=(6, 8), seed=3))


@pytest.fixture(scope="session")
def small_video(small_seq):
    return VideoData.from_sequence(small_seq)


def random_homography(rng, scale=1.0):
    """A mild, well-conditioned projective transform for 8-64 px images."""
    h = np.eye(3)
    h[:2, :2] += scale * rng.uniform(-0.08, 0.08, (2, 2))
    h[:2, 2] = scale * rng.uniform(-3, 3, 2)
    h[2, :2] = scale * rng.uniform(-2e-3, 2e-3, 2)
    return h
