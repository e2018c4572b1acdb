"""Variational least-squares learning of interaction kernels.

The loss

    E(phi) = (1/LM) sum_{l,m} || Xdot_l^m - f_phi(X_l^m) ||^2

(agent-averaged norm: weight 1/N for one type, 1/N_{c(i)} per agent for
several) is quadratic over a finite-dimensional hypothesis space, so the
minimizer solves a normal system A alpha = b.  All kernels (every type pair,
and both the position- and velocity-weighted roles for second-order systems)
enter one joint system, since trajectories cannot be separated per kernel.

Assembly iterates snapshots in canonical (m, l) order; parallel assembly
splits that order into contiguous chunks whose partial sums are merged in
chunk order, so thread count never changes the result beyond float roundoff.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .core import ORDER_FIRST, ORDER_SECOND, SystemSpec, TrajectoryDataset, validate_dataset
from .errors import (
    AssemblyCorruptionError,
    ConfigError,
    DataError,
    DegenerateBasisError,
    ResourceError,
)
from . import measure as _measure
from .models import KernelFunction, KernelSet
from .sim import IntegratorConfig, Trajectory, default_integrator, integrate

FAMILY_PW_CONSTANT = "pw_constant"
FAMILY_PW_LINEAR = "pw_linear"
FAMILY_BSPLINE = "bspline"
FAMILIES = (FAMILY_PW_CONSTANT, FAMILY_PW_LINEAR, FAMILY_BSPLINE)

MAX_DIMENSION = 10_000

BlockKey = tuple  # (k1, k2, role)


@dataclass(frozen=True, eq=False)
class HypothesisSpace:
    """Finite-dimensional function space on [r_min, r_max].

    Families: piecewise constants on n cells (right-open, last cell closed),
    piecewise-linear hat functions on n nodes, or clamped B-splines of the
    given degree.  Basis functions vanish outside [r_min, r_max].
    """

    r_min: float
    r_max: float
    family: str
    n: int
    knots: np.ndarray
    degree: int = 3

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def points_dim(self) -> int:
        return 1

    def eval_basis(self, r) -> np.ndarray:
        """Basis matrix of shape (len(r), n); rows for points outside the interval are zero."""
        r = np.asarray(r, dtype=float).ravel()
        out = np.zeros((r.size, self.n))
        inside = (r >= self.r_min) & (r <= self.r_max)
        if not np.any(inside):
            return out
        ri = r[inside]
        rows = np.flatnonzero(inside)
        if self.family == FAMILY_PW_CONSTANT:
            idx = np.searchsorted(self.knots, ri, side="right") - 1
            idx = np.clip(idx, 0, self.n - 1)
            out[rows, idx] = 1.0
        elif self.family == FAMILY_PW_LINEAR:
            nodes = self.knots
            cell = np.searchsorted(nodes, ri, side="right") - 1
            cell = np.clip(cell, 0, self.n - 2)
            t = (ri - nodes[cell]) / (nodes[cell + 1] - nodes[cell])
            out[rows, cell] = 1.0 - t
            out[rows, cell + 1] += t
        else:
            dm = BSpline.design_matrix(ri, self.knots, self.degree)
            out[rows, :] = dm.toarray()
        return out


@dataclass(frozen=True, eq=False)
class TensorProductSpace:
    """Product basis over R^2 built from two 1-d hypothesis spaces."""

    space_x: HypothesisSpace
    space_y: HypothesisSpace

    @property
    def n(self) -> int:
        return self.space_x.n * self.space_y.n

    @property
    def points_dim(self) -> int:
        return 2

    def eval_basis(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        bx = self.space_x.eval_basis(pts[:, 0])
        by = self.space_y.eval_basis(pts[:, 1])
        return np.einsum("qi,qj->qij", bx, by).reshape(pts.shape[0], self.n)


def build_hypothesis_space(r_min: float, r_max: float, n: int,
                           family: str = FAMILY_PW_LINEAR, degree: int = 3,
                           max_dim: int = MAX_DIMENSION) -> HypothesisSpace:
    """Uniform-knot hypothesis space of the requested family and dimension."""
    if not r_min < r_max:
        raise ConfigError(f"need r_min < r_max, got [{r_min}, {r_max}]")
    if n < 1:
        raise ConfigError("dimension n must be >= 1")
    if n > max_dim:
        raise ResourceError(f"hypothesis dimension {n} exceeds cap {max_dim}")
    if family not in FAMILIES:
        raise ConfigError(f"unknown basis family {family!r}; choose from {FAMILIES}")
    if family == FAMILY_PW_CONSTANT:
        knots = np.linspace(r_min, r_max, n + 1)
    elif family == FAMILY_PW_LINEAR:
        if n < 2:
            raise ConfigError("piecewise-linear basis needs n >= 2")
        knots = np.linspace(r_min, r_max, n)
    else:
        if n < degree + 1:
            raise ConfigError(f"degree-{degree} B-spline basis needs n >= {degree + 1}")
        interior = np.linspace(r_min, r_max, n - degree + 1)
        knots = np.concatenate([np.full(degree, r_min), interior, np.full(degree, r_max)])
    return HypothesisSpace(r_min=float(r_min), r_max=float(r_max), family=family,
                           n=n, knots=knots, degree=degree)


def space_from_knots(knots, family: str = FAMILY_PW_CONSTANT, degree: int = 3) -> HypothesisSpace:
    """Hypothesis space with explicitly given knots (CLI --knots path)."""
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or len(knots) < 2 or np.any(np.diff(knots) <= 0):
        raise ConfigError("knots must be strictly increasing with at least 2 entries")
    if family == FAMILY_PW_CONSTANT:
        n = len(knots) - 1
    elif family == FAMILY_PW_LINEAR:
        n = len(knots)
    else:
        full = np.concatenate([np.full(degree, knots[0]), knots, np.full(degree, knots[-1])])
        n = len(full) - degree - 1
        knots = full
    return HypothesisSpace(r_min=float(knots[0]), r_max=float(knots[-1]),
                           family=family, n=n, knots=knots, degree=degree)


def choose_dimension(M: int, s: float) -> int:
    """Hypothesis dimension n* = max(1, rint((M / log M)^(1/(2s+1)))).

    Rounding is round-half-to-even (numpy rint); M must be at least 2 so the
    logarithm is positive.
    """
    if M < 2:
        raise ConfigError("dimension selection needs M >= 2")
    if s <= 0:
        raise ConfigError("smoothness s must be positive")
    value = (M / math.log(M)) ** (1.0 / (2.0 * s + 1.0))
    return max(1, int(np.rint(value)))


@dataclass(frozen=True, eq=False)
class KernelEstimate:
    """Learned kernel phi_hat = sum_eta alpha_eta psi_eta, zero outside the space."""

    space: HypothesisSpace | TensorProductSpace
    alpha: np.ndarray
    type_pair: tuple[int, int] = (0, 0)
    role: str = "E"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    def __call__(self, r):
        vals = self.space.eval_basis(r) @ self.alpha
        if np.ndim(r) == 0:
            return float(vals[0])
        if getattr(self.space, "points_dim", 1) == 2:
            return vals
        return vals.reshape(np.shape(r))


@dataclass(eq=False)
class NormalSystem:
    """Assembled least-squares system A alpha = b with block bookkeeping."""

    A: np.ndarray
    b: np.ndarray
    blocks: dict
    spaces: dict
    resp_sq: float  # (1/LM) sum ||response||^2 in the agent-averaged norm
    LM: int

    @property
    def n_total(self) -> int:
        return self.b.shape[0]


def required_blocks(spec: SystemSpec) -> list[BlockKey]:
    roles = ("E",) if spec.order == ORDER_FIRST else ("E", "A")
    keys = []
    for role in roles:
        for k1 in range(spec.K):
            for k2 in range(spec.K):
                keys.append((k1, k2, role))
    return keys


def normalize_spaces(spaces, spec: SystemSpec) -> dict:
    """Accept a single space (shared by all blocks) or a dict keyed by block."""
    keys = required_blocks(spec)
    if isinstance(spaces, (HypothesisSpace, TensorProductSpace)):
        return {key: spaces for key in keys}
    missing = [key for key in keys if key not in spaces]
    if missing:
        raise ConfigError(f"missing hypothesis spaces for blocks {missing}")
    return {key: spaces[key] for key in keys}


def _distance_features(X: np.ndarray, V: np.ndarray | None):
    diffs = X[None, :, :] - X[:, None, :]
    r = np.linalg.norm(diffs, axis=2)
    vdiffs = None if V is None else V[None, :, :] - V[:, None, :]
    return r, diffs, vdiffs


def _snapshot_fields(X, V, spec, spaces, blocks, slices, n_total, feature_fn):
    """Stacked basis response fields F of shape (n_total, N, d)."""
    N, d = spec.N, spec.d
    part = spec.partition
    counts = part.counts
    if feature_fn is None:
        feat, diffs, vdiffs = _distance_features(X, V)
    else:
        feat = feature_fn(X, V)  # (N, N) or (N, N, df)
        diffs = X[None, :, :] - X[:, None, :]
        vdiffs = None if V is None else V[None, :, :] - V[:, None, :]
    F = np.zeros((n_total, N, d))
    for key in blocks:
        k1, k2, role = key
        space = spaces[key]
        sl = slices[key]
        idx1 = part.members(k1)
        idx2 = part.members(k2)
        sub_feat = feat[np.ix_(idx1, idx2)]
        Psi = space.eval_basis(sub_feat.reshape(-1, *sub_feat.shape[2:]))
        Psi = Psi.reshape(len(idx1), len(idx2), space.n)
        dirs = diffs if role == "E" else vdiffs
        sub_dirs = dirs[np.ix_(idx1, idx2)]
        # self-pairs (k1 == k2 diagonal) contribute zero displacement, so no mask
        block_F = np.einsum("ije,ijd->eid", Psi, sub_dirs) / counts[k2]
        F[sl, idx1, :] = block_F
    return F


def _responses(ds: TrajectoryDataset, m: int, l: int) -> np.ndarray:
    spec = ds.spec
    if spec.order == ORDER_FIRST:
        return ds.velocities[m, l]
    X = ds.positions[m, l]
    V = ds.velocities[m, l]
    return spec.masses[:, None] * ds.accelerations[m, l] - spec.force(X, V)


def _assemble_chunk(ds, spaces, blocks, slices, n_total, mls, feature_fn):
    spec = ds.spec
    w = 1.0 / spec.partition.counts[spec.partition.labels]
    A = np.zeros((n_total, n_total))
    b = np.zeros(n_total)
    resp_sq = 0.0
    for m, l in mls:
        X = ds.positions[m, l]
        V = None if ds.velocities is None else ds.velocities[m, l]
        F = _snapshot_fields(X, V, spec, spaces, blocks, slices, n_total, feature_fn)
        resp = _responses(ds, m, l)
        A += np.einsum("pid,qid,i->pq", F, F, w)
        b += np.einsum("pid,id,i->p", F, resp, w)
        resp_sq += float(np.einsum("id,id,i->", resp, resp, w))
    return A, b, resp_sq


def assemble_normal_system(ds: TrajectoryDataset, spaces, threads: int = 1,
                           feature_fn=None) -> NormalSystem:
    """Assemble the joint normal system over all required (type pair, role) blocks.

    ``feature_fn(X, V) -> (N, N, df)`` substitutes learned reduced variables
    for the pairwise distance; the default is the distance itself.
    """
    spec = ds.spec
    if spec.order == ORDER_FIRST and ds.velocities is None:
        raise DataError("missing derivatives: first-order learning needs velocities")
    if spec.order == ORDER_SECOND and (ds.velocities is None or ds.accelerations is None):
        raise DataError("missing derivatives: second-order learning needs velocities "
                        "and accelerations")
    spaces = normalize_spaces(spaces, spec)
    blocks = required_blocks(spec)
    slices = {}
    offset = 0
    for key in blocks:
        n = spaces[key].n
        slices[key] = slice(offset, offset + n)
        offset += n
    n_total = offset

    mls = [(m, l) for m in range(ds.M) for l in range(ds.L)]
    if threads > 1 and len(mls) > 1:
        n_chunks = min(threads, len(mls))
        bounds = np.linspace(0, len(mls), n_chunks + 1).astype(int)
        chunks = [mls[bounds[c]:bounds[c + 1]] for c in range(n_chunks)]
        with ThreadPoolExecutor(max_workers=n_chunks) as pool:
            parts = list(pool.map(
                lambda ch: _assemble_chunk(ds, spaces, blocks, slices, n_total, ch, feature_fn),
                chunks))
        A = np.zeros((n_total, n_total))
        b = np.zeros(n_total)
        resp_sq = 0.0
        for Ac, bc, rc in parts:  # merge in chunk order for determinism
            A += Ac
            b += bc
            resp_sq += rc
    else:
        A, b, resp_sq = _assemble_chunk(ds, spaces, blocks, slices, n_total, mls, feature_fn)

    LM = max(1, len(mls))
    A /= LM
    b /= LM
    resp_sq /= LM
    return NormalSystem(A=A, b=b, blocks=slices, spaces=spaces, resp_sq=resp_sq, LM=LM)


@dataclass(frozen=True)
class SolveInfo:
    condition_number: float
    effective_rank: int
    alpha: np.ndarray
    dead_elements: tuple = ()  # basis indices with (numerically) zero data support


def solve(system: NormalSystem, ridge: float = 0.0,
          trunc_tol: float = 1e-12) -> tuple[list[KernelEstimate], SolveInfo]:
    """Minimum-norm solution of (A + ridge I) alpha = b by symmetric eigendecomposition.

    Eigenvalues below trunc_tol * lambda_max are treated as zero.  Dead basis
    directions (near-zero rows) are reported, not fatal.
    """
    A, b = system.A, system.b
    scale = np.abs(A).max(initial=0.0)
    asym = np.abs(A - A.T).max(initial=0.0)
    if scale > 0 and asym > 1e-10 * scale:
        raise AssemblyCorruptionError(
            f"assembled matrix is not symmetric: |A - A^T| = {asym:.3e}")
    A = 0.5 * (A + A.T)
    n = system.n_total
    vals, vecs = np.linalg.eigh(A + ridge * np.eye(n))
    lam_max = vals.max(initial=0.0)
    keep = vals > trunc_tol * max(lam_max, 0.0)
    inv = np.zeros_like(vals)
    inv[keep] = 1.0 / vals[keep]
    alpha = vecs @ (inv * (vecs.T @ b))
    eff_rank = int(np.count_nonzero(keep))
    cond = float(lam_max / vals[keep].min()) if eff_rank else math.inf

    diag = np.diag(A)
    dead = tuple(np.flatnonzero(diag <= trunc_tol * max(scale, 1e-300)).tolist())
    estimates = [
        KernelEstimate(space=system.spaces[key], alpha=alpha[sl],
                       type_pair=(key[0], key[1]), role=key[2])
        for key, sl in system.blocks.items()
    ]
    return estimates, SolveInfo(condition_number=cond, effective_rank=eff_rank,
                                alpha=alpha, dead_elements=dead)


@dataclass
class LearnConfig:
    """Knobs for the end-to-end learning pipeline."""

    family: str = FAMILY_PW_LINEAR
    n: int | None = None          # None: use choose_dimension(M, s)
    s: float = 1.0
    knots: np.ndarray | None = None  # explicit knots override family interval
    degree: int = 3
    ridge: float = 0.0
    trunc_tol: float = 1e-12
    bins: int = _measure.DEFAULT_BINS
    threads: int = 1
    compute_coercivity: bool = True


@dataclass(eq=False)
class LearnReport:
    radii: dict
    rho: object
    coercivity: float | None
    coercivity_note: str
    condition_number: float
    effective_rank: int
    n_per_block: dict
    n_star: int | None
    loss: float
    dead_elements: tuple = ()


def learn_kernels(ds: TrajectoryDataset,
                  config: LearnConfig | None = None) -> tuple[list[KernelEstimate], LearnReport]:
    """Support radii -> basis construction -> assembly -> solve, with diagnostics."""
    cfg = config or LearnConfig()
    problems = validate_dataset(ds)
    if problems:
        raise DataError("invalid dataset: " + "; ".join(problems))

    radii = _measure.support_radii(ds)
    n_star = None
    if cfg.knots is not None:
        base = space_from_knots(cfg.knots, family=cfg.family, degree=cfg.degree)
        spaces = {key: base for key in required_blocks(ds.spec)}
    else:
        n = cfg.n
        if n is None:
            n_star = choose_dimension(ds.M, cfg.s)
            n = n_star
        spaces = {}
        for key in required_blocks(ds.spec):
            k1, k2, _ = key
            r_min, r_max = radii[(k1, k2)]
            if r_max <= r_min:
                r_max = r_min + max(1e-9, abs(r_min) * 1e-9)
            spaces[key] = build_hypothesis_space(r_min, r_max, n, family=cfg.family,
                                                 degree=cfg.degree)

    system = assemble_normal_system(ds, spaces, threads=cfg.threads)
    estimates, info = solve(system, ridge=cfg.ridge, trunc_tol=cfg.trunc_tol)

    per_pair = ds.spec.K > 1
    rho = _measure.estimate_rho(ds, bins=cfg.bins, per_type_pair=per_pair)
    coercivity = None
    note = ""
    if cfg.compute_coercivity:
        try:
            G = np.zeros_like(system.A)
            for key, sl in system.blocks.items():
                rho_b = rho[(key[0], key[1])] if per_pair else rho
                G[sl, sl] = _measure.basis_gram(spaces[key], rho_b)
            coercivity = _measure.smallest_generalized_eigenvalue(system.A, G)
        except DegenerateBasisError as exc:
            note = str(exc)

    loss = float(info.alpha @ system.A @ info.alpha - 2.0 * system.b @ info.alpha
                 + system.resp_sq)
    report = LearnReport(
        radii=radii, rho=rho, coercivity=coercivity, coercivity_note=note,
        condition_number=info.condition_number, effective_rank=info.effective_rank,
        n_per_block={key: spaces[key].n for key in system.blocks},
        n_star=n_star, loss=max(loss, 0.0), dead_elements=info.dead_elements,
    )
    return estimates, report


def estimates_to_kernel_set(estimates: list[KernelEstimate], spec: SystemSpec) -> KernelSet:
    """Arrange kernel estimates into the K x K grid demanded by the system."""
    table = {(e.type_pair[0], e.type_pair[1], e.role): e for e in estimates}
    missing = [key for key in required_blocks(spec) if key not in table]
    if missing:
        raise ConfigError(f"estimates do not cover blocks {missing}")

    def wrap(est: KernelEstimate) -> KernelFunction:
        space = est.space
        continuous = getattr(space, "family", "") != FAMILY_PW_CONSTANT
        return KernelFunction(fn=est, R=float(space.r_max), continuous=continuous,
                              name=f"estimate{est.type_pair}/{est.role}")

    K = spec.K
    E = tuple(tuple(wrap(table[(k1, k2, "E")]) for k2 in range(K)) for k1 in range(K))
    A = None
    if spec.order == ORDER_SECOND:
        A = tuple(tuple(wrap(table[(k1, k2, "A")]) for k2 in range(K)) for k1 in range(K))
    return KernelSet(E=E, A=A)


def predict_trajectories(estimates: list[KernelEstimate], spec: SystemSpec,
                         x0: np.ndarray, v0: np.ndarray | None, times,
                         cfg: IntegratorConfig | None = None) -> Trajectory:
    """Integrate the learned system from the given initial conditions."""
    kernels = estimates_to_kernel_set(estimates, spec)
    times = np.asarray(times, dtype=float)
    if cfg is None:
        obs_dt = float(np.min(np.diff(times))) if len(times) > 1 else None
        cfg = default_integrator(kernels, obs_dt=obs_dt)
    return integrate(spec, kernels, x0, v0, times, cfg)


def empirical_loss(ds: TrajectoryDataset, kernels: KernelSet) -> float:
    """Direct evaluation of the empirical loss at the given kernels."""
    from .models import rhs_first_order_matrix, rhs_second_order_matrix

    spec = ds.spec
    w = 1.0 / spec.partition.counts[spec.partition.labels]
    total = 0.0
    for m in range(ds.M):
        for l in range(ds.L):
            X = ds.positions[m, l]
            if spec.order == ORDER_FIRST:
                resid = ds.velocities[m, l] - rhs_first_order_matrix(X, kernels, spec.partition)
            else:
                V = ds.velocities[m, l]
                interaction = (spec.masses[:, None]
                               * rhs_second_order_matrix(X, V, kernels, spec)
                               - spec.force(X, V))
                resid = _responses(ds, m, l) - interaction
            total += float(np.einsum("id,id,i->", resid, resid, w))
    return total / (ds.M * ds.L)
