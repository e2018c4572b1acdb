import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colldyn.core import homogeneous_partition
from colldyn.errors import ConfigError, EvaluationError
from colldyn.models import (
    catalog,
    fwep_kernels,
    opinion_kernel,
    power_law_kernel,
    preset,
    rhs_first_order,
    rhs_first_order_matrix,
    rhs_second_order,
    zero_kernel,
    homogeneous_set,
    constant_kernel,
    KernelSet,
)


def brute_force_first_order(X, kernels, partition):
    """Independent double-loop oracle for the first-order RHS."""
    N, d = X.shape
    counts = partition.counts
    labels = partition.labels
    out = np.zeros((N, d))
    for i in range(N):
        for j in range(N):
            if j == i:
                continue
            r = np.linalg.norm(X[j] - X[i])
            phi = kernels.kernel("E", labels[i], labels[j])(r)
            out[i] += phi * (X[j] - X[i]) / counts[labels[j]]
    return out


def brute_force_second_order(X, V, kernels, spec):
    N, d = X.shape
    labels = spec.partition.labels
    counts = spec.partition.counts
    out = np.zeros((N, d))
    force = spec.force(X, V)
    for i in range(N):
        acc = force[i].copy()
        for j in range(N):
            if j == i:
                continue
            r = np.linalg.norm(X[j] - X[i])
            acc += kernels.kernel("E", labels[i], labels[j])(r) * (X[j] - X[i]) / counts[labels[j]]
            acc += kernels.kernel("A", labels[i], labels[j])(r) * (V[j] - V[i]) / counts[labels[j]]
        out[i] = acc / spec.masses[i]
    return out


class TestKernelCatalog:
    def test_opinion_values(self):
        phi = opinion_kernel()
        assert phi(0.5) == 1.0
        assert phi(0.8) == 0.1
        assert phi(1.2) == 0.0

    def test_opinion_boundary(self):
        phi = opinion_kernel()
        assert phi(1.0 / math.sqrt(2)) == 0.1
        assert phi(1.0) == 0.1

    def test_fwep_values(self):
        ks = fwep_kernels()
        assert ks.kernel("A", 0, 0)(0.0) == 1.0
        assert ks.kernel("A", 0, 0)(math.sqrt(3.0)) == pytest.approx(0.5, abs=1e-15)
        assert ks.kernel("E", 0, 0)(7.3) == 1.0

    def test_constant_catalog(self):
        spec, ks = catalog("constant", c=1.0)
        assert ks.kernel("E", 0, 0)(0.4) == 1.0

    def test_predator_prey_defaults(self):
        spec, ks = catalog("predator_prey")
        assert spec.K == 2
        assert spec.partition.counts.tolist() == [19, 1]
        assert ks.kernel("E", 0, 0)(1.0) == pytest.approx(0.0)
        assert ks.kernel("E", 0, 1)(1.0) == pytest.approx(-2.0)
        assert ks.kernel("E", 1, 0)(2.0) == pytest.approx(3.5 / 4.0)
        assert ks.kernel("E", 1, 1)(0.7) == 0.0

    def test_power_law(self):
        spec, ks = catalog("power_law", theta=2.0)
        assert ks.kernel("E", 0, 0)(2.0) == pytest.approx(0.25)

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="opinion"):
            catalog("vicsek")

    def test_unknown_parameter(self):
        with pytest.raises(ConfigError):
            catalog("opinion", gamma=2.0)

    def test_support_honored(self):
        phi = opinion_kernel()
        r = np.linspace(1.01, 10.0, 50)
        assert np.all(phi(r) == 0.0)

    def test_power_law_singularity_guard(self):
        phi = power_law_kernel(theta=2.0)
        assert np.isfinite(phi(0.0))


class TestFirstOrderRHS:
    def test_two_agents_constant(self):
        spec, ks = catalog("constant", c=1.0, N=2, d=1)
        out = rhs_first_order(np.array([0.0, 2.0]), ks, spec.partition)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-15)

    def test_zero_kernel_gives_zero(self):
        part = homogeneous_partition(4)
        ks = homogeneous_set(zero_kernel())
        X = np.random.default_rng(0).normal(size=8)
        assert np.all(rhs_first_order(X, ks, part) == 0.0)

    def test_matches_brute_force_opinion(self):
        rng = np.random.default_rng(3)
        part = homogeneous_partition(3)
        ks = homogeneous_set(opinion_kernel())
        X = rng.normal(size=(3, 2))
        got = rhs_first_order_matrix(X, ks, part)
        want = brute_force_first_order(X, ks, part)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_matches_brute_force_multitype(self):
        rng = np.random.default_rng(9)
        spec, ks = catalog("predator_prey", N1=4, N2=2)
        X = rng.normal(size=(6, 2))
        got = rhs_first_order_matrix(X, ks, spec.partition)
        want = brute_force_first_order(X, ks, spec.partition)
        np.testing.assert_allclose(got, want, atol=1e-13)

    def test_nonfinite_input_raises(self):
        spec, ks = catalog("constant", N=2, d=1)
        with pytest.raises(EvaluationError):
            rhs_first_order(np.array([0.0, np.nan]), ks, spec.partition)

    def test_center_of_mass_conserved(self):
        rng = np.random.default_rng(4)
        part = homogeneous_partition(6)
        ks = homogeneous_set(opinion_kernel())
        X = rng.normal(size=(6, 3))
        out = rhs_first_order_matrix(X, ks, part)
        np.testing.assert_allclose(out.sum(axis=0), 0.0, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_translation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        part = homogeneous_partition(4)
        ks = homogeneous_set(opinion_kernel())
        X = rng.normal(size=(4, 2))
        c = rng.normal(size=(1, 2))
        np.testing.assert_allclose(
            rhs_first_order_matrix(X + c, ks, part),
            rhs_first_order_matrix(X, ks, part), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_rotation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        part = homogeneous_partition(5)
        ks = homogeneous_set(constant_kernel(0.7))
        X = rng.normal(size=(5, 3))
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        np.testing.assert_allclose(
            rhs_first_order_matrix(X @ Q.T, ks, part),
            rhs_first_order_matrix(X, ks, part) @ Q.T, atol=1e-12)


class TestSecondOrderRHS:
    def test_zero_kernels_zero_force(self):
        p = preset("fwep", N=3, d=2)
        ks = KernelSet(E=((zero_kernel(),),), A=((zero_kernel(),),))
        rng = np.random.default_rng(0)
        X, V = rng.normal(size=(2, 6))
        out = rhs_second_order(X, V, ks, p.spec)
        assert np.all(out == 0.0)

    def test_two_agents_energy_only(self):
        p = preset("fwep", N=2, d=1)
        ks = KernelSet(E=((constant_kernel(1.0),),), A=((zero_kernel(),),))
        out = rhs_second_order(np.array([0.0, 2.0]), np.zeros(2), ks, p.spec)
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-15)

    def test_matches_brute_force_fwep(self):
        p = preset("fwep", N=4, d=2)
        rng = np.random.default_rng(5)
        X = rng.normal(size=(4, 2))
        V = rng.normal(size=(4, 2))
        got = rhs_second_order(X.ravel(), V.ravel(), p.kernels, p.spec).reshape(4, 2)
        want = brute_force_second_order(X, V, p.kernels, p.spec)
        np.testing.assert_allclose(got, want, atol=1e-14)

    def test_masses_and_force_enter(self):
        from colldyn.core import ParametricForce, SystemSpec

        spec = SystemSpec(order="second", N=2, d=1, partition=homogeneous_partition(2),
                          masses=np.array([2.0, 1.0]),
                          force=ParametricForce("friction_propulsion", (1.0, 0.0)))
        ks = KernelSet(E=((constant_kernel(1.0),),), A=((zero_kernel(),),))
        X = np.array([0.0, 2.0])
        V = np.array([1.0, 0.0])
        got = rhs_second_order(X, V, ks, spec)
        want = brute_force_second_order(X.reshape(2, 1), V.reshape(2, 1), ks, spec).ravel()
        np.testing.assert_allclose(got, want, atol=1e-14)
