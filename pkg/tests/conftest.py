import numpy as np
import pytest
import torch

from sslnas.data import DatasetDescriptor, load_dataset
from sslnas.rng import seeded_rng
from sslnas.space import SearchSpaceSpec, StageSpec, candidate_set


@pytest.fixture(scope="session", autouse=True)
def _torch_threads():
    # Tiny models: one thread keeps runs fast and scheduling-independent.
    torch.set_num_threads(1)


def micro_space(width: float = 1.0, *, stem: int = 8, stages=((2, 8, False),), floor: int = 8) -> SearchSpaceSpec:
    """A small layout for fast tests: defaults to one 2-cell stage at 8 channels."""
    return SearchSpaceSpec(
        stages=tuple(StageSpec(num_cells=n, out_channels=c, downsamples=d) for n, c, d in stages),
        width_multiplier=width,
        stem_channels=stem,
        channel_floor=floor,
    )


def random_choices(space, rng: np.random.Generator):
    """One uniformly random candidate per cell."""
    ops = []
    for i in range(space.total_cells):
        cands = candidate_set(space, i)
        ops.append(cands[int(rng.integers(0, len(cands)))])
    return ops


@pytest.fixture(scope="session")
def synthetic_10() -> object:
    """10-class 32x32 synthetic dataset shared across tests."""
    return load_dataset(DatasetDescriptor(kind="synthetic", classes=10, samples_per_class=20, image_size=32, seed=11))


@pytest.fixture(scope="session")
def synthetic_small() -> object:
    """4-class 16x16 synthetic dataset for micro training runs."""
    return load_dataset(DatasetDescriptor(kind="synthetic", classes=4, samples_per_class=12, image_size=16, seed=5))


def rng_for_test(*keys):
    return seeded_rng(20260809, *keys)
