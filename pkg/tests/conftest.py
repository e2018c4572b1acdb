import numpy as np
import pytest

from colldyn.core import (
    SystemSpec,
    TrajectoryDataset,
    homogeneous_partition,
)
from colldyn.models import preset
from colldyn.sim import generate_dataset


def tiny_dataset(N=2, d=1, M=1, L=2, order="first", seed=0):
    """Minimal well-formed dataset built by hand (no integration)."""
    rng = np.random.default_rng(seed)
    spec = SystemSpec(order=order, N=N, d=d, partition=homogeneous_partition(N))
    times = np.linspace(0.0, 1.0, L)
    positions = rng.normal(size=(M, L, N, d))
    velocities = rng.normal(size=(M, L, N, d))
    accelerations = rng.normal(size=(M, L, N, d)) if order == "second" else None
    return TrajectoryDataset(times=times, positions=positions, velocities=velocities,
                             accelerations=accelerations, spec=spec, seed=seed)


@pytest.fixture(scope="session")
def opinion_dataset_small():
    """Noise-free opinion data, small but sufficient for exact recovery tests."""
    p = preset("opinion", N=10)
    times = np.linspace(0.0, 5.0, 20)
    return p, generate_dataset(p.spec, p.kernels, p.mu0, M=8, times=times, seed=42)


@pytest.fixture(scope="session")
def fwep_dataset_small():
    """Small noisy second-order flocking dataset."""
    p = preset("fwep", N=6, d=2)
    times = np.linspace(0.0, 1.0, 4)
    ds = generate_dataset(p.spec, p.kernels, p.mu0, M=2, times=times, seed=5,
                          noise_sigma=0.01, mu0_v=p.mu0_v)
    return p, ds
