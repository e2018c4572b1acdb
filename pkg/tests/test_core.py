import numpy as np
import pytest

from colldyn.core import (
    InitialDistribution,
    ParametricForce,
    SystemSpec,
    TrajectoryDataset,
    TypePartition,
    homogeneous_partition,
    validate_dataset,
)
from colldyn.errors import ConfigError

from conftest import tiny_dataset


def test_wellformed_dataset_passes():
    ds = tiny_dataset(M=1, L=2, N=2, d=1)
    assert validate_dataset(ds) == []


def test_times_not_strictly_increasing_reported():
    ds = tiny_dataset()
    bad = ds.replace(times=np.array([0.0, 0.5, 0.5]),
                     positions=np.zeros((1, 3, 2, 1)),
                     velocities=np.zeros((1, 3, 2, 1)))
    report = validate_dataset(bad)
    assert any("times not strictly increasing" in item for item in report)


def test_missing_derivatives_reported():
    ds = tiny_dataset()
    bad = ds.replace(velocities=None)
    report = validate_dataset(bad)
    assert any("missing derivatives for learning" in item for item in report)


def test_second_order_needs_accelerations():
    ds = tiny_dataset(order="second")
    bad = ds.replace(accelerations=None)
    report = validate_dataset(bad)
    assert any("missing derivatives for learning" in item for item in report)


def test_validation_is_pure_and_idempotent():
    ds = tiny_dataset()
    bad = ds.replace(times=np.array([0.0, -1.0]))
    first = validate_dataset(bad)
    second = validate_dataset(bad)
    assert first == second


def test_nonfinite_positions_reported():
    ds = tiny_dataset()
    pos = ds.positions.copy()
    pos[0, 0, 0, 0] = np.nan
    report = validate_dataset(ds.replace(positions=pos))
    assert any("non-finite" in item for item in report)


def test_partition_empty_type_reported():
    part = TypePartition(labels=np.zeros(4, dtype=int), K=2)
    assert any("no members" in v for v in part.violations())


def test_partition_counts():
    part = TypePartition(labels=np.array([0, 0, 1, 0]), K=2)
    assert part.counts.tolist() == [3, 1]
    assert part.members(1).tolist() == [2]


def test_spec_negative_mass_reported():
    spec = SystemSpec(order="second", N=2, d=1, partition=homogeneous_partition(2),
                      masses=np.array([1.0, -1.0]))
    assert any("masses" in v for v in spec.violations())


def test_force_none_is_zero():
    f = ParametricForce("none")
    v = np.ones((3, 2))
    assert np.all(f(v, v) == 0)


def test_force_friction_propulsion_formula():
    f = ParametricForce("friction_propulsion", (0.5, 2.0))
    x = np.zeros((1, 2))
    v = np.array([[0.6, 0.8]])  # unit speed: propulsion term vanishes
    out = f(x, v)
    np.testing.assert_allclose(out, 0.5 * v, atol=1e-15)


def test_force_unknown_kind_raises():
    with pytest.raises(ConfigError):
        ParametricForce("antigravity")


def test_initial_distribution_unknown_family():
    with pytest.raises(ConfigError):
        InitialDistribution("cauchy", {})


def test_dataset_arrays_immutable():
    ds = tiny_dataset()
    with pytest.raises(ValueError):
        ds.positions[0, 0, 0, 0] = 1.0
