import numpy as np
import pytest

from vamkit.data import generate_dataset, load_dataset
from vamkit.network import NetworkConfig
from vamkit.seeding import make_rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 items x 2 consumers at 32x32; shared read-only across tests."""
    root = tmp_path_factory.mktemp("tiny") / "ds"
    generate_dataset(root, n_items=8, consumers_per_item=2, extents=(32, 32), seed=7)
    return load_dataset(root)


@pytest.fixture(scope="session")
def inshop_dataset(tmp_path_factory):
    """4 items with 3 shop images each, for in-shop sampling and evaluation."""
    root = tmp_path_factory.mktemp("inshop") / "ds"
    generate_dataset(root, n_items=4, consumers_per_item=1, extents=(32, 32), seed=11,
                     shops_per_item=3)
    return load_dataset(root)


@pytest.fixture
def desk_config():
    return NetworkConfig()


def spread_values(seed: int, shape) -> np.ndarray:
    """Shuffled linspace in [-1, 1]: no ties, nothing within 1e-3 of zero."""
    size = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, size + 2)[1:-1]
    return make_rng(seed, "spread").permutation(vals).astype(np.float32).reshape(shape)
