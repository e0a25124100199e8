import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acps import forest
from acps.core import FeatureStack, Pose


def blob_image(width, height, channels, spots, noise, rng, sigma=1.5):
    """Feature stack with Gaussian blobs at (channel, x, y) spots."""
    data = rng.normal(0.0, noise, size=(channels, height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for ch, x, y in spots:
        data[ch] += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return FeatureStack(data.astype(np.float32))


def two_action_images(rng, n_per_action=4, size=32):
    """Tiny training set: each action marks its joints in its own channel."""
    images = []
    for i in range(2 * n_per_action):
        action = i % 2
        jx = float(rng.uniform(8, size - 8))
        jy = float(rng.uniform(8, size - 8))
        spots = [(0, jx, jy), (1 + action, jx, jy)]
        stack = blob_image(size, size, 3, spots, 0.01, rng)
        locs = np.tile([[jx, jy]], (13, 1)).astype(float)
        images.append((stack, Pose(locs), action))
    return images


DESK_CONFIG = forest.TrainConfig(
    n_trees=4, max_depth=6, min_leaf=6, n_candidates=120,
    n_pos=150, n_neg=150, n_images=20, window_radius=4,
    pos_radius=2.0, neg_margin=6.0,
)


@pytest.fixture(scope="session")
def desk_forest():
    """A small trained two-action forest shared by map-level tests."""
    rng = np.random.default_rng(11)
    images = two_action_images(rng)
    return forest.train_forest(
        images[: len(images) // 2], images[len(images) // 2 :],
        0, "head", ("a0", "a1"), DESK_CONFIG, seed=5,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
