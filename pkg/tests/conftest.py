import os

# must happen before numba is imported anywhere
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import numpy as np
import pytest

from cbct_forge.volcore import Grid3, LabelVolume, Volume3


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def grid8():
    return Grid3((8, 8, 8), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def make_volume(data, unit="normalized01", spacing=(1.0, 1.0, 1.0), origin=None):
    data = np.asarray(data)
    dims = data.shape[::-1]
    if origin is None:
        origin = tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))
    return Volume3(Grid3(dims, spacing, origin), data, unit)


def make_labels(labels, scheme="eso4", spacing=(1.0, 1.0, 1.0)):
    labels = np.asarray(labels, dtype=np.uint8)
    dims = labels.shape[::-1]
    origin = tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))
    return LabelVolume(Grid3(dims, spacing, origin), labels, scheme)
