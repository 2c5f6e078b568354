import numpy as np
import pytest
from scipy.ndimage import map_coordinates


def value_noise(h, w, seed, octaves=4):
    """Smooth random texture in [0.1, 0.9] with gradients everywhere."""
    rng = np.random.default_rng(seed)
    img = np.zeros((h, w))
    for o in range(octaves):
        hh = max(2, h >> (octaves - 1 - o))
        ww = max(2, w >> (octaves - 1 - o))
        base = rng.random((hh, ww))
        gy, gx = np.meshgrid(np.linspace(0, hh - 1, h), np.linspace(0, ww - 1, w),
                             indexing="ij")
        img += map_coordinates(base, [gy, gx], order=3, mode="wrap") * (0.5 ** (octaves - 1 - o))
    img -= img.min()
    img /= img.max()
    return 0.1 + 0.8 * img


@pytest.fixture(scope="session")
def textured_pair():
    """Image and its 3 px horizontally wrapped shift (flow = (3, 0))."""
    i0 = value_noise(64, 128, seed=1)
    i1 = np.roll(i0, 3, axis=1)
    return i0, i1
