"""Gaussian-process learning of second-order interaction kernels.

The position- and velocity-weighted kernels get independent zero-mean GP
priors.  Because the acceleration map applies a known linear operator to the
kernels, the covariance of the observed accelerations is that operator applied
to both arguments of the scalar covariance functions,

    cov(f_i(Y), f_j(Y')) = (1/N^2) sum_{pairs} [ K_E(r, r') dx dx'^T
                                               + K_A(r, r') dv dv'^T ],

assembled here as sparse-operator sandwiches U K(rr, rr) U^T over all pairwise
distances rr in the data.  Hyperparameters (signal variances, lengthscales,
noise, optional force parameters) are trained by minimizing the negative log
marginal likelihood with a multi-start simplex search; the posterior mean and
variance on a distance grid follow from the standard Gaussian conditioning
formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse

from .core import ORDER_SECOND, TrajectoryDataset, rng_from
from .errors import (
    ConditioningError,
    ConfigError,
    DataError,
    NotFittedError,
    ResourceError,
)

DNML_CAP = 6000
PAIR_CAP = 5000

COV_MATERN52 = "matern52"
COV_SQEXP = "squared_exponential"


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary scalar covariance on distances: family, signal variance, lengthscale."""

    family: str = COV_MATERN52
    signal_variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.family not in (COV_MATERN52, COV_SQEXP):
            raise ConfigError(f"unknown covariance family {self.family!r}")
        if self.lengthscale <= 0:
            raise ConfigError("lengthscale must be strictly positive")
        if self.signal_variance < 0:
            raise ConfigError("signal variance must be nonnegative")

    def from_abs_diff(self, diff: np.ndarray) -> np.ndarray:
        t = diff / self.lengthscale
        if self.family == COV_SQEXP:
            return self.signal_variance * np.exp(-0.5 * t * t)
        u = math.sqrt(5.0) * t
        return self.signal_variance * (1.0 + u + u * u / 3.0) * np.exp(-u)

    def __call__(self, ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
        ra = np.asarray(ra, dtype=float)
        rb = np.asarray(rb, dtype=float)
        return self.from_abs_diff(np.abs(ra[:, None] - rb[None, :]))


@dataclass(frozen=True)
class GPConfig:
    """Hyperparameters: per-role covariances, noise sigma, parametric-force parameters."""

    cov_E: CovarianceSpec = CovarianceSpec()
    cov_A: CovarianceSpec = CovarianceSpec()
    noise_sigma: float = 0.01
    force_params: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")
        object.__setattr__(self, "force_params", tuple(float(p) for p in self.force_params))

    def cov(self, role: str) -> CovarianceSpec:
        return self.cov_E if role == "E" else self.cov_A


@dataclass(eq=False)
class _Design:
    """Precomputed linear-operator structure of a second-order dataset."""

    rr: np.ndarray                  # (P,) all pairwise distances, snapshot-major
    U_E: scipy.sparse.csr_matrix    # (n_out, P) position-difference operator / N
    U_A: scipy.sparse.csr_matrix    # (n_out, P) velocity-difference operator / N
    mz: np.ndarray                  # (n_out,) mass-weighted accelerations
    fv_friction: np.ndarray         # (n_out,) force feature multiplying a1
    fv_propulsion: np.ndarray       # (n_out,) force feature multiplying a2
    force_kind: str
    n_out: int
    MNL: int
    _abs_diff: np.ndarray | None = None

    @property
    def abs_diff(self) -> np.ndarray:
        if self._abs_diff is None:
            self._abs_diff = np.abs(self.rr[:, None] - self.rr[None, :])
        return self._abs_diff

    def response(self, force_params) -> np.ndarray:
        if self.force_kind == "none":
            return self.mz
        a1, a2 = force_params
        return self.mz - a1 * self.fv_friction - a2 * self.fv_propulsion


def build_design(ds: TrajectoryDataset, cap: int = DNML_CAP,
                 pair_cap: int = PAIR_CAP) -> _Design:
    spec = ds.spec
    if spec.order != ORDER_SECOND:
        raise DataError("GP learning applies to second-order datasets")
    if ds.velocities is None or ds.accelerations is None:
        raise DataError("GP learning needs velocities and accelerations")
    if spec.K != 1:
        raise DataError("GP learning supports a single agent type")
    M, L, N, d = ds.positions.shape
    n_out = d * N * M * L
    if n_out > cap:
        raise ResourceError(
            f"observation dimension dNML = {n_out} exceeds cap {cap}; subsample snapshots")
    iu, ju = np.triu_indices(N, k=1)
    P_snap = len(iu)
    P = P_snap * M * L
    if P > pair_cap:
        raise ResourceError(
            f"pair count {P} exceeds cap {pair_cap}; subsample snapshots")

    rr = np.empty(P)
    rows_E, cols_E, data_E = [], [], []
    rows_A, cols_A, data_A = [], [], []
    s = 0
    for m in range(M):
        for l in range(L):
            X = ds.positions[m, l]
            V = ds.velocities[m, l]
            dx = X[ju] - X[iu]
            dv = V[ju] - V[iu]
            rr[s * P_snap:(s + 1) * P_snap] = np.linalg.norm(dx, axis=1)
            base_row = s * N * d
            for p in range(P_snap):
                col = s * P_snap + p
                i, j = iu[p], ju[p]
                for a in range(d):
                    rows_E.append(base_row + i * d + a)
                    cols_E.append(col)
                    data_E.append(dx[p, a] / N)
                    rows_E.append(base_row + j * d + a)
                    cols_E.append(col)
                    data_E.append(-dx[p, a] / N)
                    rows_A.append(base_row + i * d + a)
                    cols_A.append(col)
                    data_A.append(dv[p, a] / N)
                    rows_A.append(base_row + j * d + a)
                    cols_A.append(col)
                    data_A.append(-dv[p, a] / N)
            s += 1

    U_E = scipy.sparse.csr_matrix(
        (data_E, (rows_E, cols_E)), shape=(n_out, P))
    U_A = scipy.sparse.csr_matrix(
        (data_A, (rows_A, cols_A)), shape=(n_out, P))

    mz = (spec.masses[None, None, :, None] * ds.accelerations).reshape(-1)
    fv_friction = ds.velocities.reshape(-1)
    speed2 = np.sum(ds.velocities**2, axis=-1, keepdims=True)
    fv_propulsion = ((1.0 - speed2) * ds.velocities).reshape(-1)
    return _Design(rr=rr, U_E=U_E, U_A=U_A, mz=mz,
                   fv_friction=fv_friction, fv_propulsion=fv_propulsion,
                   force_kind=spec.force.kind, n_out=n_out, MNL=M * N * L)


def _sandwich(U: scipy.sparse.csr_matrix, Kmat: np.ndarray) -> np.ndarray:
    if Kmat.size == 0:
        n = U.shape[0]
        return np.zeros((n, n))
    W = U @ Kmat              # (n_out, P)
    Kf = U @ W.T              # (n_out, n_out), symmetric up to roundoff
    return 0.5 * (Kf + Kf.T)


def _kf(design: _Design, cfg: GPConfig) -> np.ndarray:
    diff = design.abs_diff
    K = _sandwich(design.U_E, cfg.cov_E.from_abs_diff(diff))
    K += _sandwich(design.U_A, cfg.cov_A.from_abs_diff(diff))
    return K


def assemble_gp_covariance(ds: TrajectoryDataset, cfg: GPConfig) -> np.ndarray:
    """Covariance matrix of the stacked acceleration observations (dNML x dNML)."""
    return _kf(build_design(ds), cfg)


def _chol_with_jitter(Kn: np.ndarray):
    """Cholesky factor with escalating jitter 1e-10..1e-4 of the mean diagonal."""
    n = Kn.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    scale = np.trace(Kn) / n
    if scale <= 0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(Kn + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-10 * scale if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4 * scale:
                raise ConditioningError(
                    "covariance factorization failed at maximum jitter")


def _nlml_core(design: _Design, cfg: GPConfig) -> float:
    resp = design.response(cfg.force_params)
    n = design.n_out
    Kn = _kf(design, cfg) + cfg.noise_sigma**2 * np.eye(n)
    chol, _ = _chol_with_jitter(Kn)
    alpha = scipy.linalg.cho_solve((chol, True), resp)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(0.5 * resp @ alpha + 0.5 * logdet + 0.5 * n * math.log(2.0 * math.pi))


def nlml(ds: TrajectoryDataset, cfg: GPConfig) -> float:
    """Negative log marginal likelihood of the acceleration observations."""
    return _nlml_core(build_design(ds), cfg)


@dataclass
class TrainBounds:
    """Box bounds in the original (not log) parameter space."""

    signal: tuple[float, float] = (1e-4, 1e4)
    lengthscale: tuple[float, float] = (1e-3, 1e3)
    sigma: tuple[float, float] = (1e-6, 1e2)
    force: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        for name in ("signal", "lengthscale", "sigma"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ConfigError(f"{name} bounds must be positive with lo <= hi")


def default_config(ds: TrajectoryDataset, family: str = COV_MATERN52) -> GPConfig:
    """Unit signal, median-pairwise-distance lengthscale, data-recorded noise."""
    design = build_design(ds)
    ls = float(np.median(design.rr)) if design.rr.size else 1.0
    ls = max(ls, 1e-3)
    sigma = ds.noise_sigma if ds.noise_sigma > 0 else 0.1
    cov = CovarianceSpec(family=family, signal_variance=1.0, lengthscale=ls)
    return GPConfig(cov_E=cov, cov_A=cov, noise_sigma=sigma)


def _pack(cfg: GPConfig, train_force: bool) -> np.ndarray:
    x = [math.log(max(cfg.cov_E.signal_variance, 1e-300)), math.log(cfg.cov_E.lengthscale),
         math.log(max(cfg.cov_A.signal_variance, 1e-300)), math.log(cfg.cov_A.lengthscale),
         math.log(max(cfg.noise_sigma, 1e-300))]
    if train_force:
        x.extend(cfg.force_params)
    return np.asarray(x)


def _unpack(x: np.ndarray, base: GPConfig, train_force: bool) -> GPConfig:
    cov_E = replace(base.cov_E, signal_variance=math.exp(x[0]), lengthscale=math.exp(x[1]))
    cov_A = replace(base.cov_A, signal_variance=math.exp(x[2]), lengthscale=math.exp(x[3]))
    force = tuple(x[5:7]) if train_force else base.force_params
    return GPConfig(cov_E=cov_E, cov_A=cov_A, noise_sigma=math.exp(x[4]),
                    force_params=force)


def train(ds: TrajectoryDataset, init: GPConfig | None = None,
          bounds: TrainBounds | None = None, restarts: int = 5, seed: int = 0,
          maxiter: int = 200, train_force: bool | None = None):
    """Minimize the NLML over log-parameterized hyperparameters, multi-start.

    Returns (best GPConfig, trace) where trace lists (restart, nlml) results.
    The simplex search is derivative-free; restarts draw log-uniform starts
    within the bounds.
    """
    design = build_design(ds)
    base = init or default_config(ds)
    bounds = bounds or TrainBounds()
    if train_force is None:
        train_force = design.force_kind != "none"
    if design.force_kind == "none":
        train_force = False

    log_bounds = [
        (math.log(bounds.signal[0]), math.log(bounds.signal[1])),
        (math.log(bounds.lengthscale[0]), math.log(bounds.lengthscale[1])),
        (math.log(bounds.signal[0]), math.log(bounds.signal[1])),
        (math.log(bounds.lengthscale[0]), math.log(bounds.lengthscale[1])),
        (math.log(bounds.sigma[0]), math.log(bounds.sigma[1])),
    ]
    if train_force:
        log_bounds.extend([bounds.force, bounds.force])
    lo = np.array([b[0] for b in log_bounds])
    hi = np.array([b[1] for b in log_bounds])

    def objective(x):
        cfg = _unpack(np.clip(x, lo, hi), base, train_force)
        try:
            return _nlml_core(design, cfg)
        except ConditioningError:
            return 1e300

    rng = rng_from(seed, 101)
    starts = [np.clip(_pack(base, train_force), lo, hi)]
    for _ in range(max(0, restarts - 1)):
        starts.append(lo + (hi - lo) * rng.random(len(lo)))

    best_x, best_val = None, math.inf
    trace = []
    for k, x0 in enumerate(starts):
        res = scipy.optimize.minimize(
            objective, x0, method="Nelder-Mead",
            bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6},
        )
        trace.append((k, float(res.fun)))
        if res.fun < best_val:
            best_val, best_x = float(res.fun), res.x
    if best_x is None or not math.isfinite(best_val):
        raise ConditioningError("all training restarts failed factorization")
    return _unpack(np.clip(best_x, lo, hi), base, train_force), trace


class GPModel:
    """Trained-kernel container: hyperparameters plus cached posterior state."""

    def __init__(self, cfg: GPConfig):
        self.cfg = cfg
        self._design: _Design | None = None
        self._chol: np.ndarray | None = None
        self._weights: np.ndarray | None = None
        self.clamp_events: int = 0

    @property
    def fitted(self) -> bool:
        return self._design is not None

    def fit(self, ds: TrajectoryDataset) -> "GPModel":
        design = build_design(ds)
        n = design.n_out
        Kn = _kf(design, self.cfg) + self.cfg.noise_sigma**2 * np.eye(n)
        chol, _ = _chol_with_jitter(Kn)
        resp = design.response(self.cfg.force_params)
        self._design = design
        self._chol = chol
        self._weights = scipy.linalg.cho_solve((chol, True), resp) if n else np.zeros(0)
        return self

    def _cross(self, role: str, r_star: np.ndarray) -> np.ndarray:
        design = self._design
        cov = self.cfg.cov(role)
        U = design.U_E if role == "E" else design.U_A
        if design.rr.size == 0:
            return np.zeros((len(r_star), design.n_out))
        return (U @ cov(design.rr, r_star)).T  # (n_star, n_out)

    def posterior_kernel(self, role: str, r_star) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the kernel on a distance grid.

        Negative variances from roundoff are clamped to zero and counted in
        ``clamp_events``.
        """
        if not self.fitted:
            raise NotFittedError("posterior queried before fit()")
        if role not in ("E", "A"):
            raise ConfigError("role must be 'E' or 'A'")
        r_star = np.atleast_1d(np.asarray(r_star, dtype=float))
        if np.any(r_star < 0):
            raise ConfigError("distances must be nonnegative")
        cov = self.cfg.cov(role)
        prior = np.full(r_star.shape, cov.signal_variance)
        if self._design.n_out == 0:
            return np.zeros_like(r_star), prior
        cross = self._cross(role, r_star)
        mean = cross @ self._weights
        tmp = scipy.linalg.cho_solve((self._chol, True), cross.T)
        var = prior - np.einsum("ij,ji->i", cross, tmp)
        clamped = var < 0
        self.clamp_events += int(np.count_nonzero(clamped))
        return mean, np.where(clamped, 0.0, var)


def fit_posterior(ds: TrajectoryDataset, cfg: GPConfig) -> GPModel:
    return GPModel(cfg).fit(ds)


def posterior_kernel(post: GPModel, role: str, r_star):
    """Module-level convenience wrapper around GPModel.posterior_kernel."""
    return post.posterior_kernel(role, r_star)


def representer_check(ds: TrajectoryDataset, cfg: GPConfig, lam_E: float,
                      lam_A: float, r_grid=None, misscale: bool = False) -> float:
    """Max discrepancy between the GP posterior mean and the ridge minimizer.

    With priors scaled by sigma^2 / (M N L lambda) per role, the GP posterior
    mean must coincide with the minimizer of the regularized empirical risk;
    the ridge path is solved independently through representer coefficients
    with the unscaled kernels.  ``misscale=True`` skips the prior scaling,
    which breaks the identity and serves as a negative control.
    """
    if lam_E <= 0 or lam_A <= 0:
        raise ConfigError("regularization weights must be positive")
    design = build_design(ds)
    if r_grid is None:
        lo, hi = float(design.rr.min()), float(design.rr.max())
        r_grid = np.linspace(lo, hi, 50)
    r_grid = np.asarray(r_grid, dtype=float)
    resp = design.response(cfg.force_params)
    MNL = design.MNL
    sigma2 = cfg.noise_sigma**2

    diff = design.abs_diff
    K_E = cfg.cov_E.from_abs_diff(diff)
    K_A = cfg.cov_A.from_abs_diff(diff)
    G_E = _sandwich(design.U_E, K_E)
    G_A = _sandwich(design.U_A, K_A)

    # GP path: posterior mean under the (optionally mis-scaled) priors
    scale_E = 1.0 if misscale else sigma2 / (MNL * lam_E)
    scale_A = 1.0 if misscale else sigma2 / (MNL * lam_A)
    Kn = scale_E * G_E + scale_A * G_A + sigma2 * np.eye(design.n_out)
    chol, _ = _chol_with_jitter(Kn)
    w_gp = scipy.linalg.cho_solve((chol, True), resp)
    cross_E = (design.U_E @ cfg.cov_E(design.rr, r_grid)).T
    cross_A = (design.U_A @ cfg.cov_A(design.rr, r_grid)).T
    gp_E = scale_E * cross_E @ w_gp
    gp_A = scale_A * cross_A @ w_gp

    # ridge path: representer coefficients of the regularized empirical risk
    Kr = G_E / lam_E + G_A / lam_A + MNL * np.eye(design.n_out)
    chol_r, _ = _chol_with_jitter(Kr)
    c = scipy.linalg.cho_solve((chol_r, True), resp)
    krr_E = cross_E @ c / lam_E
    krr_A = cross_A @ c / lam_A

    return float(max(np.abs(gp_E - krr_E).max(initial=0.0),
                     np.abs(gp_A - krr_A).max(initial=0.0)))
