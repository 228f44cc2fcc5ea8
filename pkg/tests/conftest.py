import numpy as np
import pytest

from pgrain import PointCloud


def random_cloud(rng, n_points=None, feature_dim=3, labeled=False, num_classes=4,
                 scale=1.0):
    """Uniform cloud in a cube with uniform features, optionally labeled."""
    if n_points is None:
        n_points = int(rng.integers(2, 128))
    labels = rng.integers(0, num_classes, size=n_points) if labeled else None
    return PointCloud(
        coords=rng.uniform(-scale, scale, size=(n_points, 3)),
        features=rng.uniform(-1.0, 1.0, size=(n_points, feature_dim)),
        labels=labels,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
