"""Forward integration of the catalog models and reproducible dataset generation.

Derivatives stored at snapshots are exact right-hand-side evaluations at the
integrated states, matching the assumption that state derivatives are
observed.  Finite differences (``approx_derivatives``) are an explicitly
flagged fallback.  Observation noise is added after integration, never inside
the dynamics.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .core import (
    DERIV_FINITE_DIFFERENCE,
    DERIV_OBSERVED,
    ORDER_FIRST,
    ORDER_SECOND,
    InitialDistribution,
    SystemSpec,
    TrajectoryDataset,
    rng_from,
)
from .errors import ConfigError, InsufficientDataError, IntegrationError
from .models import KernelSet, rhs_first_order_matrix, rhs_second_order_matrix


@dataclass(frozen=True)
class IntegratorConfig:
    """Numerical integrator selection.

    ``rk45`` is adaptive (scipy RK45 with abs_tol / rel_tol); ``rk4`` is the
    classic fixed-step scheme whose effective step exactly divides each
    observation interval (n_sub = ceil(dt / step) substeps).
    """

    method: str = "rk45"
    step: float = 0.01
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ConfigError(f"unknown integrator method {self.method!r}")
        if self.method == "rk4" and self.step <= 0:
            raise ConfigError("rk4 requires a positive step")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ConfigError("tolerances must be positive")


def default_integrator(kernels: KernelSet, obs_dt: float | None = None) -> IntegratorConfig:
    """RK45 at 1e-9 tolerances; discontinuous kernels force fixed-step RK4."""
    if kernels.continuous:
        return IntegratorConfig(method="rk45")
    step = (obs_dt / 5.0) if obs_dt else 0.02
    return IntegratorConfig(method="rk4", step=step)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Single integrated trajectory with RHS-evaluated derivatives."""

    times: np.ndarray
    positions: np.ndarray  # (L, N, d)
    velocities: np.ndarray  # (L, N, d): derivative (first) or state (second)
    accelerations: np.ndarray | None = None  # (L, N, d), second order only


def sample_initial(mu0: InitialDistribution, spec: SystemSpec, seed: int,
                   mu0_v: InitialDistribution | None = None):
    """Draw i.i.d. per-agent initial conditions, deterministic in the seed.

    Returns (positions, velocities) with velocities None for first order.
    """
    rng = rng_from(seed)
    x0 = mu0.sample(spec.N, spec.d, rng)
    if spec.order == ORDER_FIRST:
        return x0, None
    if mu0_v is None:
        mu0_v = InitialDistribution("gaussian", {"mean": 0.0, "var": 1.0})
    v0 = mu0_v.sample(spec.N, spec.d, rng)
    return x0, v0


def _flat_rhs(spec: SystemSpec, kernels: KernelSet):
    N, d = spec.N, spec.d
    if spec.order == ORDER_FIRST:

        def fun(t, y):
            return rhs_first_order_matrix(y.reshape(N, d), kernels, spec.partition).ravel()

    else:

        def fun(t, y):
            X = y[: N * d].reshape(N, d)
            V = y[N * d:].reshape(N, d)
            acc = rhs_second_order_matrix(X, V, kernels, spec)
            return np.concatenate([V.ravel(), acc.ravel()])

    return fun


def _rk4_fixed(fun, y0, times, step, max_steps):
    states = np.empty((len(times), y0.size))
    states[0] = y0
    y = y0.astype(float).copy()
    steps_taken = 0
    for l in range(len(times) - 1):
        t0, t1 = times[l], times[l + 1]
        dt = t1 - t0
        n_sub = max(1, math.ceil(dt / step - 1e-12))
        h = dt / n_sub
        t = t0
        for _ in range(n_sub):
            k1 = fun(t, y)
            k2 = fun(t + h / 2, y + h / 2 * k1)
            k3 = fun(t + h / 2, y + h / 2 * k2)
            k4 = fun(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
            steps_taken += 1
            if steps_taken > max_steps:
                raise IntegrationError(f"step budget exhausted at t={t:.6g}")
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={t1:.6g}")
        states[l + 1] = y
    return states


def integrate(spec: SystemSpec, kernels: KernelSet, x0: np.ndarray,
              v0: np.ndarray | None, times: np.ndarray,
              cfg: IntegratorConfig | None = None) -> Trajectory:
    """Integrate one trajectory and evaluate exact derivatives at each snapshot."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ConfigError("times must be strictly increasing")
    if cfg is None:
        cfg = default_integrator(kernels, obs_dt=float(np.min(np.diff(times))) if len(times) > 1 else None)
    N, d = spec.N, spec.d
    x0 = np.asarray(x0, dtype=float).reshape(N, d)
    if spec.order == ORDER_SECOND:
        if v0 is None:
            raise ConfigError("second-order integration needs initial velocities")
        y0 = np.concatenate([x0.ravel(), np.asarray(v0, dtype=float).ravel()])
    else:
        y0 = x0.ravel()

    fun = _flat_rhs(spec, kernels)
    if len(times) == 1:
        states = y0[None, :].copy()
    elif cfg.method == "rk4":
        states = _rk4_fixed(fun, y0, times, cfg.step, cfg.max_steps)
    else:
        sol = solve_ivp(fun, (times[0], times[-1]), y0, method="RK45",
                        t_eval=times, rtol=cfg.rel_tol, atol=cfg.abs_tol)
        if not sol.success:
            t_fail = sol.t[-1] if len(sol.t) else times[0]
            raise IntegrationError(f"integration failed at t={t_fail:.6g}: {sol.message}")
        states = sol.y.T
        if not np.all(np.isfinite(states)):
            bad = np.flatnonzero(~np.all(np.isfinite(states), axis=1))[0]
            raise IntegrationError(f"non-finite state at t={times[bad]:.6g}")

    L = len(times)
    if spec.order == ORDER_FIRST:
        positions = states.reshape(L, N, d)
        velocities = np.empty_like(positions)
        for l in range(L):
            velocities[l] = rhs_first_order_matrix(positions[l], kernels, spec.partition)
        return Trajectory(times=times, positions=positions, velocities=velocities)

    positions = states[:, : N * d].reshape(L, N, d)
    velocities = states[:, N * d:].reshape(L, N, d)
    accelerations = np.empty_like(positions)
    for l in range(L):
        accelerations[l] = rhs_second_order_matrix(positions[l], velocities[l], kernels, spec)
    return Trajectory(times=times, positions=positions, velocities=velocities,
                      accelerations=accelerations)


def generate_dataset(spec: SystemSpec, kernels: KernelSet, mu0: InitialDistribution,
                     M: int, times: np.ndarray, cfg: IntegratorConfig | None = None,
                     seed: int = 0, noise_sigma: float = 0.0,
                     mu0_v: InitialDistribution | None = None,
                     deriv_noise_sigma: float | None = None,
                     threads: int = 1) -> TrajectoryDataset:
    """Generate M independent trajectories from i.i.d. initial conditions.

    The dataset is a pure function of all arguments: per-trajectory RNG
    streams derive from (seed, m), so thread count never changes the result.
    If noise_sigma > 0, i.i.d. N(0, sigma^2) perturbations are added to every
    stored position and derivative component after integration
    (deriv_noise_sigma defaults to noise_sigma).
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    times = np.asarray(times, dtype=float)
    if deriv_noise_sigma is None:
        deriv_noise_sigma = noise_sigma

    def _sample_m(m: int):
        rng = rng_from(seed, m, 0)
        x0 = mu0.sample(spec.N, spec.d, rng)
        v0 = None
        if spec.order == ORDER_SECOND:
            mu_v = mu0_v or InitialDistribution("gaussian", {"mean": 0.0, "var": 1.0})
            v0 = mu_v.sample(spec.N, spec.d, rng)
        return x0, v0

    def one(m: int) -> Trajectory:
        x0, v0 = _sample_m(m)
        try:
            return integrate(spec, kernels, x0, v0, times, cfg)
        except IntegrationError as exc:
            raise IntegrationError(f"trajectory m={m}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajs = list(pool.map(one, range(M)))
    else:
        trajs = [one(m) for m in range(M)]

    L, N, d = len(times), spec.N, spec.d
    positions = np.stack([t.positions for t in trajs])
    velocities = np.stack([t.velocities for t in trajs])
    accelerations = None
    if spec.order == ORDER_SECOND:
        accelerations = np.stack([t.accelerations for t in trajs])

    if noise_sigma > 0 or deriv_noise_sigma > 0:
        positions = positions.copy()
        velocities = velocities.copy()
        for m in range(M):
            rng = rng_from(seed, m, 1)
            positions[m] += noise_sigma * rng.standard_normal((L, N, d))
            if spec.order == ORDER_FIRST:
                velocities[m] += deriv_noise_sigma * rng.standard_normal((L, N, d))
            else:
                velocities[m] += deriv_noise_sigma * rng.standard_normal((L, N, d))
                accelerations[m] = accelerations[m] + deriv_noise_sigma * rng.standard_normal((L, N, d))

    return TrajectoryDataset(
        times=times, positions=positions, velocities=velocities,
        accelerations=accelerations, derivative_source=DERIV_OBSERVED,
        spec=spec, seed=seed, noise_sigma=noise_sigma,
    )


def _fd_weights(t0, t1, t2, at):
    """Derivative of the quadratic interpolant through (t0, t1, t2) at ``at``."""
    w0 = (2 * at - t1 - t2) / ((t0 - t1) * (t0 - t2))
    w1 = (2 * at - t0 - t2) / ((t1 - t0) * (t1 - t2))
    w2 = (2 * at - t0 - t1) / ((t2 - t0) * (t2 - t1))
    return w0, w1, w2


def finite_difference(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Second-order finite differences along axis 0 on a possibly nonuniform grid.

    Central three-point stencils at interior snapshots, one-sided three-point
    stencils at the endpoints; with only two snapshots the single slope is
    used at both ends (exact for degree-1 data).
    """
    L = len(times)
    if L < 2:
        raise InsufficientDataError("finite differences need at least 2 snapshots")
    out = np.empty_like(values)
    if L == 2:
        slope = (values[1] - values[0]) / (times[1] - times[0])
        out[0] = slope
        out[1] = slope
        return out
    for l in range(L):
        if l == 0:
            i0, i1, i2 = 0, 1, 2
        elif l == L - 1:
            i0, i1, i2 = L - 3, L - 2, L - 1
        else:
            i0, i1, i2 = l - 1, l, l + 1
        w0, w1, w2 = _fd_weights(times[i0], times[i1], times[i2], times[l])
        out[l] = w0 * values[i0] + w1 * values[i1] + w2 * values[i2]
    return out


def approx_derivatives(ds: TrajectoryDataset) -> TrajectoryDataset:
    """Fill missing derivatives by finite differences; flags the source.

    Original positions are untouched.  For second-order datasets velocities
    are differenced from positions when absent, and accelerations from the
    (given or computed) velocities.
    """
    if ds.L < 2:
        raise InsufficientDataError("cannot approximate derivatives with L < 2")
    times = ds.times
    if ds.spec.order == ORDER_FIRST:
        velocities = np.stack([finite_difference(times, ds.positions[m]) for m in range(ds.M)])
        return ds.replace(velocities=velocities, derivative_source=DERIV_FINITE_DIFFERENCE)
    velocities = ds.velocities
    if velocities is None:
        velocities = np.stack([finite_difference(times, ds.positions[m]) for m in range(ds.M)])
    accelerations = ds.accelerations
    if accelerations is None:
        accelerations = np.stack([finite_difference(times, velocities[m]) for m in range(ds.M)])
    return ds.replace(velocities=velocities, accelerations=accelerations,
                      derivative_source=DERIV_FINITE_DIFFERENCE)
