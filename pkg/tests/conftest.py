import numpy as np
import pytest

from cpr.tensor_io import FeatureTensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tensor(rng, h, w, c, scale_id=1):
    return FeatureTensor(rng.normal(size=(h, w, c)).astype(np.float32), scale_id=scale_id)
