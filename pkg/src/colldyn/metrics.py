"""Error measures and the convergence-rate experiment harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ORDER_SECOND, rng_from
from .errors import ConfigError, DataError
from .estimator import LearnConfig, choose_dimension, learn_kernels, predict_trajectories
from .measure import EmpiricalRho, estimate_rho, l2rho_distance, restrict_mass
from .models import preset
from .sim import generate_dataset, integrate, sample_initial


def kernel_error(est, truth, rho: EmpiricalRho, relative: bool = False,
                 mass_fraction: float | None = None) -> float:
    """Weighted L2(rho) distance between kernels, optionally relative to the truth norm.

    ``mass_fraction`` restricts the comparison to the heaviest bins holding
    that share of the rho mass.
    """
    if mass_fraction is not None:
        rho = restrict_mass(rho, mass_fraction)
    err = l2rho_distance(est, truth, rho)
    if not relative:
        return err
    denom = l2rho_distance(lambda r: np.zeros_like(r), truth, rho)
    if denom == 0:
        raise DataError("relative error undefined: truth has zero weighted norm")
    return err / denom


def snorm_discrepancy(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Agent-averaged state discrepancy per snapshot: sqrt((1/N) sum_i |du_i|^2)."""
    diff = pred - truth
    return np.sqrt(np.mean(np.sum(diff * diff, axis=-1), axis=-1))


@dataclass(frozen=True)
class WindowError:
    t_lo: float
    t_hi: float
    sup: float
    mean: float


def trajectory_error(pred_positions: np.ndarray, truth_positions: np.ndarray,
                     times: np.ndarray, windows) -> list[WindowError]:
    """Sup and mean of the agent-averaged state discrepancy per time window."""
    pred_positions = np.asarray(pred_positions, dtype=float)
    truth_positions = np.asarray(truth_positions, dtype=float)
    times = np.asarray(times, dtype=float)
    if pred_positions.shape != truth_positions.shape:
        raise DataError("prediction and truth grids do not match")
    if pred_positions.shape[0] != times.shape[0]:
        raise DataError("positions and times lengths do not match")
    per_snapshot = snorm_discrepancy(pred_positions, truth_positions)
    out = []
    for t_lo, t_hi in windows:
        mask = (times >= t_lo) & (times <= t_hi)
        if not np.any(mask):
            raise DataError(f"window [{t_lo}, {t_hi}] contains no snapshots")
        vals = per_snapshot[mask]
        out.append(WindowError(t_lo=float(t_lo), t_hi=float(t_hi),
                               sup=float(vals.max()), mean=float(vals.mean())))
    return out


def prediction_windows(estimates, spec, truth_kernels, mu0, T: float, L: int,
                       cfg=None, seed: int = 0, mu0_v=None) -> list[WindowError]:
    """Trajectory errors of the learned system on [0, T] and on [T, 2T].

    Both windows are integrated against the ground truth from fresh initial
    conditions; the future window restarts from the *truth* state at t = T so
    the two windows measure independent failure modes.
    """
    x0, v0 = sample_initial(mu0, spec, seed=seed, mu0_v=mu0_v)
    times_train = np.linspace(0.0, T, L)
    times_future = np.linspace(T, 2.0 * T, L)

    truth_train = integrate(spec, truth_kernels, x0, v0, times_train, cfg)
    v_at_T = truth_train.velocities[-1] if spec.order == ORDER_SECOND else None
    truth_future = integrate(spec, truth_kernels, truth_train.positions[-1], v_at_T,
                             times_future, cfg)

    pred_train = predict_trajectories(estimates, spec, x0, v0, times_train, cfg)
    pred_future = predict_trajectories(estimates, spec, truth_train.positions[-1],
                                       v_at_T, times_future, cfg)

    train_err = trajectory_error(pred_train.positions, truth_train.positions,
                                 times_train, [(0.0, T)])[0]
    future_err = trajectory_error(pred_future.positions, truth_future.positions,
                                  times_future, [(T, 2.0 * T)])[0]
    return [train_err, future_err]


@dataclass
class SweepConfig:
    """Configuration of an error-vs-M convergence sweep on a catalog model."""

    model: str = "power_law"
    model_params: dict = field(default_factory=lambda: {"theta": -1.0, "N": 8, "d": 1})
    Ms: tuple = (8, 16, 32, 64, 128, 256, 512)
    trials: int = 3
    seed: int = 0
    s: float = 1.0
    family: str = "pw_constant"
    L: int = 5
    T: float = 1.0
    noise_sigma: float = 0.0
    deriv_noise_sigma: float | None = None  # None: same as noise_sigma
    bins: int = 200
    threads: int = 1


@dataclass(frozen=True)
class SweepRow:
    M: int
    n_star: int
    mean_rel_err: float
    std: float
    trials: int


@dataclass(frozen=True)
class SweepResult:
    rows: tuple
    slope: float
    intercept: float

    def errors(self) -> np.ndarray:
        return np.array([row.mean_rel_err for row in self.rows])


def _single_trial(cfg: SweepConfig, M: int, trial: int) -> float:
    p = preset(cfg.model, **cfg.model_params)
    if p.spec.K != 1:
        raise ConfigError("convergence sweeps support single-type models")
    times = np.linspace(0.0, cfg.T, cfg.L)
    trial_seed = int(rng_from(cfg.seed, M, trial).integers(0, 2**31 - 1))
    ds = generate_dataset(p.spec, p.kernels, p.mu0, M=M, times=times,
                          seed=trial_seed, noise_sigma=cfg.noise_sigma,
                          deriv_noise_sigma=cfg.deriv_noise_sigma, mu0_v=p.mu0_v)
    n_star = choose_dimension(M, cfg.s)
    learn_cfg = LearnConfig(family=cfg.family, n=n_star, bins=cfg.bins,
                            threads=cfg.threads, compute_coercivity=False)
    estimates, _ = learn_kernels(ds, learn_cfg)
    rho = estimate_rho(ds, bins=cfg.bins)
    truth = p.kernels.kernel("E", 0, 0)
    return kernel_error(estimates[0], truth, rho, relative=True)


def convergence_sweep(cfg: SweepConfig) -> SweepResult:
    """Relative kernel error versus M at the rate-optimal dimension n*(M, s).

    The log-log slope is fitted on per-M mean errors with all M weighted
    equally.  Results are a pure function of (seed, config).
    """
    if len(cfg.Ms) < 3:
        raise ConfigError("sweep needs at least 3 values of M")
    if any(m2 <= m1 for m1, m2 in zip(cfg.Ms, cfg.Ms[1:])):
        raise ConfigError("Ms must be strictly increasing")
    rows = []
    for M in cfg.Ms:
        errs = np.array([_single_trial(cfg, M, t) for t in range(cfg.trials)])
        std = float(errs.std(ddof=1)) if cfg.trials > 1 else 0.0
        rows.append(SweepRow(M=int(M), n_star=choose_dimension(M, cfg.s),
                             mean_rel_err=float(errs.mean()), std=std,
                             trials=cfg.trials))
    log_m = np.log([row.M for row in rows])
    log_e = np.log([max(row.mean_rel_err, 1e-300) for row in rows])
    slope, intercept = np.polyfit(log_m, log_e, 1)
    return SweepResult(rows=tuple(rows), slope=float(slope), intercept=float(intercept))
