import numpy as np
import pytest

from colldyn.errors import DataError, DegenerateBasisError
from colldyn.estimator import build_hypothesis_space
from colldyn.measure import (
    EmpiricalRho,
    basis_gram,
    estimate_coercivity,
    estimate_rho,
    l2rho_distance,
    overall_radii,
    restrict_mass,
    smallest_generalized_eigenvalue,
    support_radii,
)
from colldyn.models import preset
from colldyn.sim import generate_dataset

from conftest import tiny_dataset


def brute_force_distances(ds):
    out = []
    for m in range(ds.M):
        for l in range(ds.L):
            for i in range(ds.N):
                for j in range(i + 1, ds.N):
                    out.append(np.linalg.norm(ds.positions[m, l, j] - ds.positions[m, l, i]))
    return np.array(out)


def static_pair_dataset(distance=1.5):
    from colldyn.core import SystemSpec, TrajectoryDataset, homogeneous_partition

    spec = SystemSpec(order="first", N=2, d=1, partition=homogeneous_partition(2))
    positions = np.array([[[[0.0], [distance]]]])
    velocities = np.zeros_like(positions)
    return TrajectoryDataset(times=np.array([0.0]), positions=positions,
                             velocities=velocities, spec=spec)


class TestEstimateRho:
    def test_single_atom(self):
        ds = static_pair_dataset(1.5)
        rho = estimate_rho(ds, bins=10, r_range=(0.0, 2.0))
        mids = rho.midpoints
        assert rho.weights.sum() == pytest.approx(1.0, abs=1e-12)
        hot = np.flatnonzero(rho.weights)
        assert len(hot) == 1
        assert abs(mids[hot[0]] - 1.5) <= 0.1

    def test_weights_sum_to_one(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        rho = estimate_rho(ds, bins=77)
        assert abs(rho.weights.sum() - 1.0) <= 1e-12

    def test_matches_brute_force_enumeration(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        rho = estimate_rho(ds, bins=40)
        dists = brute_force_distances(ds)
        counts, _ = np.histogram(dists, bins=rho.bin_edges)
        np.testing.assert_allclose(rho.weights, counts / counts.sum(), atol=1e-15)

    def test_per_pair_recombines_to_all(self):
        p = preset("predator_prey", N1=5, N2=2)
        times = np.linspace(0.0, 0.3, 4)
        ds = generate_dataset(p.spec, p.kernels, p.mu0, M=2, times=times, seed=3)
        lo, hi = overall_radii(ds)
        all_rho = estimate_rho(ds, bins=25, r_range=(lo, hi))
        pair_rho = estimate_rho(ds, bins=25, per_type_pair=True, r_range=(lo, hi))
        # unordered pairs weighted by sample counts rebuild the pooled histogram
        combo = np.zeros(25)
        total = 0
        for (k1, k2), rho in pair_rho.items():
            if k1 > k2:
                continue
            combo += rho.weights * rho.pair_count
            total += rho.pair_count
        np.testing.assert_allclose(combo / total, all_rho.weights, atol=1e-12)

    def test_mirror_pairs_share_histogram(self):
        p = preset("predator_prey", N1=4, N2=3)
        times = np.linspace(0.0, 0.2, 3)
        ds = generate_dataset(p.spec, p.kernels, p.mu0, M=1, times=times, seed=8)
        rhos = estimate_rho(ds, bins=11, per_type_pair=True)
        np.testing.assert_array_equal(rhos[(0, 1)].weights, rhos[(1, 0)].weights)

    def test_single_agent_rejected(self):
        ds = tiny_dataset(N=2)
        one = ds.replace(positions=ds.positions[:, :, :1], velocities=ds.velocities[:, :, :1])
        with pytest.raises(DataError):
            estimate_rho(one)


class TestSupportRadii:
    def test_static_pair(self):
        ds = static_pair_dataset(1.5)
        radii = support_radii(ds)
        assert radii[(0, 0)] == (1.5, 1.5)

    def test_time_reversal_invariant(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        reversed_ds = ds.replace(
            times=ds.times,
            positions=np.ascontiguousarray(ds.positions[:, ::-1]),
            velocities=np.ascontiguousarray(ds.velocities[:, ::-1]))
        assert support_radii(ds) == support_radii(reversed_ds)

    def test_matches_brute_force(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        dists = brute_force_distances(ds)
        got = support_radii(ds)[(0, 0)]
        assert got == pytest.approx((dists.min(), dists.max()), abs=0.0)


class TestL2RhoDistance:
    def test_identity(self):
        rho = EmpiricalRho(bin_edges=np.linspace(0, 1, 11), weights=np.full(10, 0.1))
        f = lambda r: np.sin(r)
        assert l2rho_distance(f, f, rho) == 0.0

    def test_single_atom_value(self):
        # one bin with midpoint 2, unit difference: sqrt(1 * 1 * 4) = 2
        rho = EmpiricalRho(bin_edges=np.array([1.5, 2.5]), weights=np.array([1.0]))
        got = l2rho_distance(lambda r: np.ones_like(r), lambda r: np.zeros_like(r), rho)
        assert got == pytest.approx(2.0, abs=1e-15)

    @staticmethod
    def _oracle(fk, gk, edges, w, sub=200):
        # refined Riemann sum: each bin's mass spread uniformly over the bin
        total = 0.0
        for b in range(len(w)):
            lo, hi = edges[b], edges[b + 1]
            rs = lo + (np.arange(sub) + 0.5) * (hi - lo) / sub
            vals = (fk(rs) - gk(rs)) ** 2 * rs**2
            total += w[b] * vals.mean()
        return np.sqrt(total)

    def test_matches_refined_quadrature_oracle(self):
        # piecewise kernels with breakpoints on bin edges of a 1000-bin rho
        B = 1000
        edges = np.linspace(0.0, 1.0, B + 1)
        rng = np.random.default_rng(0)
        w = rng.random(B) + 0.05
        w /= w.sum()
        rho = EmpiricalRho(bin_edges=edges, weights=w)
        f = build_hypothesis_space(0.0, 1.0, 5, family="pw_linear")
        alpha_f = np.array([1.2, 1.0, 1.3, 0.9, 1.1])
        alpha_g = np.array([0.2, -0.15, 0.45, -0.2, 0.2])
        fk = lambda r: f.eval_basis(r) @ alpha_f
        gk = lambda r: f.eval_basis(r) @ alpha_g
        got = l2rho_distance(fk, gk, rho)
        want = self._oracle(fk, gk, edges, w)
        assert got == pytest.approx(want, rel=1e-6)

    def test_midpoint_rule_refinement_study(self):
        # bin refinement must shrink the midpoint-rule discrepancy at O(h^2)
        f = build_hypothesis_space(0.0, 1.0, 4, family="pw_linear")
        alpha_f = np.array([0.0, 1.0, 0.5, -0.3])
        fk = lambda r: f.eval_basis(r) @ alpha_f
        gk = lambda r: np.zeros_like(r)
        errs = []
        for B in (50, 500):
            edges = np.linspace(0.0, 1.0, B + 1)
            w = np.full(B, 1.0 / B)
            rho = EmpiricalRho(bin_edges=edges, weights=w)
            got = l2rho_distance(fk, gk, rho)
            want = self._oracle(fk, gk, edges, w)
            errs.append(abs(got - want) / want)
        assert errs[1] < errs[0] / 25.0

    def test_pseudometric_on_random_triples(self):
        rng = np.random.default_rng(1)
        rho = EmpiricalRho(bin_edges=np.linspace(0.1, 2.0, 21),
                           weights=np.full(20, 0.05))
        space = build_hypothesis_space(0.1, 2.0, 4, family="pw_linear")
        coeffs = rng.normal(size=(50, 3, 4))
        for fa, fb, fc in coeffs:
            f = lambda r, v=fa: space.eval_basis(r) @ v
            g = lambda r, v=fb: space.eval_basis(r) @ v
            h = lambda r, v=fc: space.eval_basis(r) @ v
            dfg = l2rho_distance(f, g, rho)
            dgf = l2rho_distance(g, f, rho)
            assert dfg == pytest.approx(dgf, abs=1e-12)
            assert l2rho_distance(f, f, rho) == 0.0
            assert dfg <= l2rho_distance(f, h, rho) + l2rho_distance(h, g, rho) + 1e-12

    def test_restrict_mass(self):
        rho = EmpiricalRho(bin_edges=np.linspace(0, 1, 5),
                           weights=np.array([0.7, 0.2, 0.05, 0.05]))
        sub = restrict_mass(rho, 0.85)
        assert sub.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.count_nonzero(sub.weights) == 2


class TestCoercivity:
    def test_identical_forms_give_one(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(6, 6))
        G = X @ X.T + 6 * np.eye(6)
        assert smallest_generalized_eigenvalue(G, G) == pytest.approx(1.0, abs=1e-10)

    def test_nonnegative(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        lo, hi = overall_radii(ds)
        space = build_hypothesis_space(lo, hi, 3, family="pw_constant")
        assert estimate_coercivity(ds, space) >= 0.0

    def test_opinion_stable_across_seeds(self):
        p = preset("opinion", N=10)
        times = np.linspace(0.0, 5.0, 20)
        values = []
        for seed in (0, 1, 2):
            ds = generate_dataset(p.spec, p.kernels, p.mu0, M=20, times=times, seed=seed)
            lo, hi = overall_radii(ds)
            space = build_hypothesis_space(lo, hi, 3, family="pw_constant")
            values.append(estimate_coercivity(ds, space))
        values = np.array(values)
        assert np.all(values > 0)
        assert values.max() / values.min() < 1.2 / 0.8

    def test_change_of_basis_invariance(self):
        rng = np.random.default_rng(3)
        n = 5
        X = rng.normal(size=(n, n))
        A = X @ X.T
        Y = rng.normal(size=(n, n))
        G = Y @ Y.T + n * np.eye(n)
        T = rng.normal(size=(n, n)) + n * np.eye(n)
        lam = smallest_generalized_eigenvalue(A, G)
        lam_t = smallest_generalized_eigenvalue(T.T @ A @ T, T.T @ G @ T)
        assert lam_t == pytest.approx(lam, abs=1e-10 * max(1.0, lam))

    def test_dead_basis_named(self, opinion_dataset_small):
        _, ds = opinion_dataset_small
        space = build_hypothesis_space(50.0, 60.0, 3, family="pw_constant")
        with pytest.raises(DegenerateBasisError, match=r"\[0, 1, 2\]"):
            estimate_coercivity(ds, space)

    def test_basis_gram_partition_of_unity(self):
        rho = EmpiricalRho(bin_edges=np.linspace(0.0, 1.0, 11), weights=np.full(10, 0.1))
        space = build_hypothesis_space(0.0, 1.0, 4, family="pw_linear")
        G = basis_gram(space, rho)
        # sum of all entries equals the norm of the constant-1 function
        ones = np.ones(4)
        want = sum(rho.weights * rho.midpoints**2)
        assert ones @ G @ ones == pytest.approx(want, rel=1e-12)
