import numpy as np
import pytest
import torch

from sparseseg.data import BACKGROUND, FOREGROUND, Sample


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def square_mask():
    """32x32 binary mask with a 10x10 foreground square."""
    dense = np.full((32, 32), BACKGROUND, dtype=np.int64)
    dense[11:21, 11:21] = FOREGROUND
    return dense


def make_samples(n, size=16, seed=0, prefix="s"):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        dense = np.full((size, size), BACKGROUND, dtype=np.int64)
        c = rng.integers(size // 4, 3 * size // 4, size=2)
        r = int(rng.integers(2, size // 4))
        yy, xx = np.mgrid[:size, :size]
        dense[(yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r**2] = FOREGROUND
        image = 0.2 * rng.standard_normal((size, size, 1)) + (dense == FOREGROUND)[..., None]
        samples.append(Sample(image=image.astype(np.float32), dense_mask=dense, id=f"{prefix}{i}"))
    return samples


@pytest.fixture
def samples():
    return make_samples(10)
