import math

import numpy as np
import pytest

from colldyn.core import (
    ParametricForce,
    SystemSpec,
    TrajectoryDataset,
    homogeneous_partition,
)
from colldyn.errors import ConfigError, DataError, NotFittedError, ResourceError
from colldyn.gp import (
    CovarianceSpec,
    GPConfig,
    GPModel,
    assemble_gp_covariance,
    build_design,
    default_config,
    fit_posterior,
    nlml,
    posterior_kernel,
    representer_check,
    train,
)
from colldyn.models import preset
from colldyn.sim import generate_dataset


def handmade_second_order(positions, velocities, accelerations, masses=None,
                          force=ParametricForce("none"), noise_sigma=0.0):
    M, L, N, d = positions.shape
    spec = SystemSpec(order="second", N=N, d=d, partition=homogeneous_partition(N),
                      masses=masses, force=force)
    times = np.linspace(0.0, 1.0, L) if L > 1 else np.array([0.0])
    return TrajectoryDataset(times=times, positions=positions, velocities=velocities,
                             accelerations=accelerations, spec=spec,
                             noise_sigma=noise_sigma)


def small_fwep(M=2, L=4, N=5, sigma=0.01, seed=3):
    p = preset("fwep", N=N, d=2)
    times = np.linspace(0.0, 1.0, L)
    ds = generate_dataset(p.spec, p.kernels, p.mu0, M=M, times=times, seed=seed,
                          noise_sigma=sigma, mu0_v=p.mu0_v)
    return p, ds


class TestCovarianceAssembly:
    def test_single_agent_zero_matrix(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(1, 2, 1, 2))
        ds = handmade_second_order(pos, rng.normal(size=pos.shape),
                                   rng.normal(size=pos.shape))
        K = assemble_gp_covariance(ds, GPConfig())
        assert K.shape == (4, 4)
        assert np.all(K == 0.0)

    def test_zero_signal_zero_matrix(self):
        _, ds = small_fwep()
        cfg = GPConfig(cov_E=CovarianceSpec(signal_variance=0.0),
                       cov_A=CovarianceSpec(signal_variance=0.0))
        K = assemble_gp_covariance(ds, cfg)
        assert np.abs(K).max() == 0.0

    def test_monte_carlo_covariance_oracle(self):
        # N=2, d=1, L=M=1: push GP draws of the kernels through the linear map
        x = np.array([[[[0.0], [1.3]]]])
        v = np.array([[[[0.4], [-0.2]]]])
        a = np.zeros_like(x)
        ds = handmade_second_order(x, v, a)
        cfg = GPConfig(cov_E=CovarianceSpec(signal_variance=0.8, lengthscale=1.0),
                       cov_A=CovarianceSpec(signal_variance=0.3, lengthscale=2.0))
        K = assemble_gp_covariance(ds, cfg)

        rng = np.random.default_rng(1)
        n_draws = 100_000
        dx, dv, r = 1.3, -0.6, 1.3
        phi_E = math.sqrt(0.8) * rng.standard_normal(n_draws)
        phi_A = math.sqrt(0.3) * rng.standard_normal(n_draws)
        f1 = 0.5 * (phi_E * dx + phi_A * dv)
        f = np.stack([f1, -f1], axis=1)
        emp = (f.T @ f) / n_draws
        for i in range(2):
            for j in range(2):
                se = math.sqrt((K[i, i] * K[j, j] + K[i, j] ** 2) / n_draws)
                assert abs(emp[i, j] - K[i, j]) <= 3.0 * se

    def test_psd_before_jitter(self):
        _, ds = small_fwep()
        K = assemble_gp_covariance(ds, GPConfig())
        vals = np.linalg.eigvalsh(K)
        assert vals.min() >= -1e-8 * max(vals.max(), 1.0)

    def test_dimension_cap(self):
        pos = np.zeros((10, 10, 20, 2))
        ds = handmade_second_order(pos, pos, pos)
        ds = ds.replace(times=np.linspace(0, 1, 10))
        with pytest.raises(ResourceError, match="subsample"):
            build_design(ds)

    def test_first_order_rejected(self):
        from conftest import tiny_dataset

        with pytest.raises(DataError):
            build_design(tiny_dataset())


class TestNLML:
    def test_gaussian_normalizer_closed_form(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(1, 2, 3, 1))
        vel = rng.normal(size=pos.shape)
        acc = np.zeros_like(pos)  # zero response
        ds = handmade_second_order(pos, vel, acc)
        cfg = GPConfig(cov_E=CovarianceSpec(signal_variance=0.0),
                       cov_A=CovarianceSpec(signal_variance=0.0), noise_sigma=1.0)
        n = 1 * 2 * 3 * 1
        assert nlml(ds, cfg) == pytest.approx(0.5 * n * math.log(2 * math.pi), abs=1e-10)

    def test_sigma_doubling_changes_value(self):
        _, ds = small_fwep()
        base = default_config(ds)
        a = nlml(ds, base)
        from dataclasses import replace

        b = nlml(ds, replace(base, noise_sigma=2 * base.noise_sigma))
        assert abs(a - b) > 1e-6

    def test_matches_dense_oracle(self):
        _, ds = small_fwep(M=1, L=3, N=4)
        cfg = default_config(ds)
        design = build_design(ds)
        K = assemble_gp_covariance(ds, cfg)
        n = design.n_out
        Kn = K + cfg.noise_sigma**2 * np.eye(n)
        r = design.response(cfg.force_params)
        direct = (0.5 * r @ np.linalg.inv(Kn) @ r
                  + 0.5 * np.linalg.slogdet(Kn)[1]
                  + 0.5 * n * math.log(2 * math.pi))
        assert nlml(ds, cfg) == pytest.approx(direct, abs=1e-8)


class TestTrain:
    def test_recovers_noise_scale(self):
        _, ds = small_fwep(M=2, L=5, N=6, sigma=0.01, seed=7)
        cfg, _ = train(ds, restarts=2, seed=0, maxiter=150)
        assert 0.005 <= cfg.noise_sigma <= 0.02

    def test_restart_from_optimum_is_stable(self):
        _, ds = small_fwep(M=1, L=3, N=4)
        cfg, trace = train(ds, restarts=1, seed=0, maxiter=120)
        value = nlml(ds, cfg)
        cfg2, trace2 = train(ds, init=cfg, restarts=1, seed=0, maxiter=120)
        assert nlml(ds, cfg2) <= value + 1e-6

    def test_point_bounds_return_point(self):
        from colldyn.gp import TrainBounds

        _, ds = small_fwep(M=1, L=2, N=3)
        bounds = TrainBounds(signal=(2.0, 2.0), lengthscale=(0.7, 0.7),
                             sigma=(0.05, 0.05))
        cfg, _ = train(ds, bounds=bounds, restarts=1, maxiter=30)
        assert cfg.cov_E.signal_variance == pytest.approx(2.0, rel=1e-12)
        assert cfg.cov_A.lengthscale == pytest.approx(0.7, rel=1e-12)
        assert cfg.noise_sigma == pytest.approx(0.05, rel=1e-12)


class TestPosterior:
    def test_no_data_returns_prior(self):
        _, ds = small_fwep(M=1, L=2, N=3)
        empty = ds.replace(positions=ds.positions[:0], velocities=ds.velocities[:0],
                           accelerations=ds.accelerations[:0])
        cfg = GPConfig(cov_E=CovarianceSpec(signal_variance=1.5),
                       cov_A=CovarianceSpec(signal_variance=0.5))
        model = fit_posterior(empty, cfg)
        r = np.linspace(0.0, 2.0, 7)
        mean, var = posterior_kernel(model, "E", r)
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_allclose(var, 1.5, atol=1e-15)

    def test_unfitted_raises(self):
        model = GPModel(GPConfig())
        with pytest.raises(NotFittedError):
            model.posterior_kernel("E", [1.0])

    def test_variance_nonincreasing_with_more_data(self):
        p = preset("fwep", N=4, d=2)
        times = np.linspace(0.0, 1.0, 4)
        ds_big = generate_dataset(p.spec, p.kernels, p.mu0, M=1, times=times, seed=1,
                                  noise_sigma=0.01, mu0_v=p.mu0_v)
        ds_small = ds_big.replace(times=ds_big.times[:3],
                                  positions=ds_big.positions[:, :3],
                                  velocities=ds_big.velocities[:, :3],
                                  accelerations=ds_big.accelerations[:, :3])
        cfg = default_config(ds_big)
        r = np.linspace(0.2, 2.0, 15)
        _, var_small = fit_posterior(ds_small, cfg).posterior_kernel("A", r)
        _, var_big = fit_posterior(ds_big, cfg).posterior_kernel("A", r)
        assert np.all(var_big <= var_small + 1e-8)

    def test_mean_linear_in_response(self):
        _, ds = small_fwep(M=1, L=3, N=4)
        cfg = default_config(ds)
        doubled = ds.replace(accelerations=2.0 * np.asarray(ds.accelerations))
        r = np.linspace(0.2, 1.5, 9)
        mean1, _ = fit_posterior(ds, cfg).posterior_kernel("E", r)
        mean2, _ = fit_posterior(doubled, cfg).posterior_kernel("E", r)
        np.testing.assert_allclose(mean2, 2.0 * mean1, atol=1e-10)

    def test_negative_distance_rejected(self):
        _, ds = small_fwep(M=1, L=2, N=3)
        model = fit_posterior(ds, default_config(ds))
        with pytest.raises(ConfigError):
            model.posterior_kernel("E", [-0.5])

    def test_band_covers_truth_mostly(self):
        p, ds = small_fwep(M=3, L=5, N=8, sigma=0.01, seed=11)
        cfg, _ = train(ds, restarts=2, seed=0, maxiter=150)
        model = fit_posterior(ds, cfg)
        from colldyn.measure import estimate_rho

        rho = estimate_rho(ds, bins=40)
        grid = rho.midpoints
        covered_mass = 0.0
        for role in ("E", "A"):
            mean, var = model.posterior_kernel(role, grid)
            truth = p.kernels.kernel(role, 0, 0)(grid)
            inside = np.abs(truth - mean) <= 2.0 * np.sqrt(var) + 1e-12
            covered_mass = float(np.sum(rho.weights[inside]))
            assert covered_mass >= 0.8, f"role {role}: coverage {covered_mass}"


class TestRepresenter:
    def test_identity_on_small_instance(self):
        # N=3, L=2, M=2 as in the contract
        _, ds = small_fwep(M=2, L=2, N=3, sigma=0.01, seed=2)
        cfg = default_config(ds)
        disc = representer_check(ds, cfg, lam_E=1e-3, lam_A=1e-3)
        assert disc < 1e-8

    def test_large_lambda_kills_both(self):
        _, ds = small_fwep(M=1, L=2, N=3)
        cfg = default_config(ds)
        design = build_design(ds)
        r_grid = np.linspace(design.rr.min(), design.rr.max(), 30)
        lam = 1e9
        sigma2 = cfg.noise_sigma**2
        MNL = design.MNL
        scale = sigma2 / (MNL * lam)
        from colldyn.gp import _kf, _chol_with_jitter
        import scipy.linalg
        from dataclasses import replace

        scaled = GPConfig(
            cov_E=replace(cfg.cov_E, signal_variance=cfg.cov_E.signal_variance * scale),
            cov_A=replace(cfg.cov_A, signal_variance=cfg.cov_A.signal_variance * scale),
            noise_sigma=cfg.noise_sigma)
        model = fit_posterior(ds, scaled)
        mean, _ = model.posterior_kernel("E", r_grid)
        assert np.abs(mean).max() < 1e-6
        assert representer_check(ds, cfg, lam, lam, r_grid=r_grid) < 1e-10

    def test_misscaled_negative_control(self):
        _, ds = small_fwep(M=2, L=2, N=3, sigma=0.01, seed=2)
        cfg = default_config(ds)
        disc = representer_check(ds, cfg, lam_E=1e-3, lam_A=1e-3, misscale=True)
        assert disc > 1e-3
