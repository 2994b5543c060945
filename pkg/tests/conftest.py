import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_box(rng, min_size=0.02, max_size=0.5):
    from dtlr.core import BBox

    w = rng.uniform(min_size, max_size)
    h = rng.uniform(min_size, max_size)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return BBox(cx, cy, w, h)
