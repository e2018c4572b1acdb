"""Feature-map learning for interaction kernels with unknown reduced variables.

When the pairwise kernel acts through an unknown low-dimensional linear
functional of a known polynomial feature map, two-agent trajectories turn the
inverse problem into plain regression: in a two-agent system the kernel value
at each snapshot is exposed by

    psi_12 = 2 <xdot_1, x_2 - x_1> / |x_2 - x_1|^2.

The reduction map is then estimated by multiplicatively perturbed least
squares (MPLS): an ordinary linear fit captures the linear component; locally
weighted slope perturbations of the residuals, stacked and decomposed by SVD,
capture the nonlinear directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ORDER_FIRST, TrajectoryDataset
from .errors import ConfigError, DataError, DegeneratePairError, IllPosedSplitError
from .estimator import HypothesisSpace, KernelEstimate, TensorProductSpace
from .estimator import assemble_normal_system, solve

COINCIDENCE_EPS = 1e-10


def feature_dim(d: int) -> int:
    """Length of the second-order polynomial feature map: 2 d^2 + 3 d."""
    return 2 * d * d + 3 * d


def feature_map_batch(Xi: np.ndarray, Xj: np.ndarray) -> np.ndarray:
    """Vectorized feature map for Q state pairs; returns (Q, 2 d^2 + 3 d).

    Component order: x_i, x_j, upper-triangular products of x_i (j <= j',
    row-major), same for x_j, then all d^2 cross products (x_i)_j (x_j)_j'.
    """
    Xi = np.asarray(Xi, dtype=float)
    Xj = np.asarray(Xj, dtype=float)
    Q, d = Xi.shape
    iu0, iu1 = np.triu_indices(d)
    quad_i = Xi[:, iu0] * Xi[:, iu1]
    quad_j = Xj[:, iu0] * Xj[:, iu1]
    cross = np.einsum("qa,qb->qab", Xi, Xj).reshape(Q, d * d)
    return np.concatenate([Xi, Xj, quad_i, quad_j, cross], axis=1)


def pairwise_feature_map(x_i, x_j) -> np.ndarray:
    """Feature vector z(x_i, x_j) for a single pair of d-dimensional states."""
    x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
    x_j = np.atleast_1d(np.asarray(x_j, dtype=float))
    return feature_map_batch(x_i[None, :], x_j[None, :])[0]


@dataclass(frozen=True, eq=False)
class FeatureSample:
    """One regression sample: feature vector z and observed kernel value psi."""

    z: np.ndarray
    psi: float


def kernel_values_from_pairs(ds: TrajectoryDataset,
                             eps: float = COINCIDENCE_EPS) -> list[FeatureSample]:
    """Extract Q = 2 L M direct kernel observations from a two-agent dataset."""
    if ds.N != 2:
        raise DataError("the direct kernel transform needs exactly N = 2 agents")
    if ds.spec.order != ORDER_FIRST or ds.velocities is None:
        raise DataError("two-agent transform needs a first-order dataset with derivatives")
    samples: list[FeatureSample] = []
    for m in range(ds.M):
        for l in range(ds.L):
            x1, x2 = ds.positions[m, l]
            v1, v2 = ds.velocities[m, l]
            u = x2 - x1
            r2 = float(u @ u)
            if r2 < eps * eps:
                raise DegeneratePairError(f"coincident agents at (m={m}, l={l})")
            psi_12 = 2.0 * float(v1 @ u) / r2
            psi_21 = 2.0 * float(v2 @ -u) / r2
            samples.append(FeatureSample(z=feature_map_batch(x1[None], x2[None])[0], psi=psi_12))
            samples.append(FeatureSample(z=feature_map_batch(x2[None], x1[None])[0], psi=psi_21))
    return samples


@dataclass(frozen=True, eq=False)
class ReductionMap:
    """Estimated feature-reduction map: orthonormal rows spanning the kernel's domain."""

    B_hat: np.ndarray       # (d_prime, D), orthonormal rows
    d_prime: int
    beta_hat: np.ndarray    # (D,) linear component from the base fit
    d: int
    D: int
    beta_negligible: bool = False
    slope_matrix_norm: float = 0.0  # Frobenius norm of the stacked perturbations

    def project(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.B_hat.T


def default_anchor_count(d_prime: int) -> int:
    """K >= d' log d' heuristic, floored away from zero via max(d', 2)."""
    return math.ceil(4.0 * d_prime * math.log(max(d_prime, 2)))


def _canonical_order(Z: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Lexicographic row order so results do not depend on sample ordering."""
    arr = np.column_stack([Z, psi])
    return np.lexsort(arr.T[::-1])


def _gram_schmidt(rows: list[np.ndarray], d_prime: int, tol: float = 1e-12) -> np.ndarray:
    basis: list[np.ndarray] = []
    for row in rows:
        v = row.astype(float).copy()
        for q in basis:
            v -= (v @ q) * q
        norm = np.linalg.norm(v)
        if norm > tol * max(1.0, np.linalg.norm(row)):
            basis.append(v / norm)
        if len(basis) == d_prime:
            break
    if len(basis) < d_prime:
        raise IllPosedSplitError(
            f"could not extract {d_prime} independent directions; more samples needed")
    return np.vstack(basis)


def mpls_reduce(samples: list[FeatureSample], d_prime: int,
                K_centers: int | None = None, lam: float | None = None,
                seed: int = 0) -> ReductionMap:
    """Estimate the reduction map by multiplicatively perturbed least squares.

    Steps: seeded half/half split; ordinary least squares linear fit beta_hat
    on one half; residuals on the other half with features projected away from
    beta_hat; per-anchor Gaussian reweighting w(z, u) = exp(-lam |z - u|^2) of
    centered residuals and a least-squares slope fit to the weight-multiplied
    residuals; rank-d' SVD of the stacked slopes.  The returned rows are the
    Gram-Schmidt orthonormalization of beta_hat followed by the singular
    directions (beta_hat is dropped, and flagged, when numerically zero).
    """
    if d_prime < 1:
        raise ConfigError("d_prime must be >= 1")
    Z = np.vstack([s.z for s in samples])
    psi = np.asarray([s.psi for s in samples], dtype=float)
    Q, D = Z.shape
    if Q < 2 * (D + 1):
        raise IllPosedSplitError(
            f"need at least 2 (D + 1) = {2 * (D + 1)} samples for the split, got {Q}")
    if lam is None:
        lam = 1.0 / D
    if lam <= 0:
        raise ConfigError("lambda must be positive")
    if K_centers is None:
        K_centers = default_anchor_count(d_prime)

    order = _canonical_order(Z, psi)
    Z, psi = Z[order], psi[order]
    # center features and responses so the no-intercept base fit is unbiased;
    # B_hat spans directions, which centering leaves untouched
    Zc = Z - Z.mean(axis=0)
    psic = psi - psi.mean()

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    perm = rng.permutation(Q)
    half = Q - Q // 2  # |S| = ceil(Q/2), |S'| = floor(Q/2), both >= floor(Q/2)
    s_idx, sp_idx = perm[:half], perm[half:]

    Zp, psip = Zc[sp_idx], psic[sp_idx]
    beta, _, rank, _ = np.linalg.lstsq(Zp, psip, rcond=None)
    if rank < D:
        raise IllPosedSplitError(
            f"linear fit design matrix has rank {rank} < D = {D}; more samples needed")

    # the linear component is negligible when the base fit explains no more
    # variance than fitting D coefficients to pure noise would; the wide
    # margin over the null mean D/|S'| absorbs heavy-tailed responses
    ss_tot = float(psip @ psip)
    ss_res = float(np.sum((psip - Zp @ beta) ** 2))
    if ss_tot <= 1e-300:
        beta_negligible = True
    else:
        r_squared = 1.0 - ss_res / ss_tot
        null_level = (D + 10.0 * math.sqrt(2.0 * D)) / len(sp_idx)
        beta_negligible = r_squared <= max(null_level, 1e-8)

    Zs, psis = Zc[s_idx], psic[s_idx]
    resid = psis - Zs @ beta
    beta_norm2 = float(beta @ beta)
    if beta_negligible or beta_norm2 == 0.0:
        Zt = Zs
    else:
        Zt = Zs - np.outer(Zs @ beta, beta) / beta_norm2

    anchors = Zc[rng.choice(Q, size=min(K_centers, Q), replace=False)]
    P = np.empty((anchors.shape[0], D))
    for i, u in enumerate(anchors):
        w = np.exp(-lam * np.sum((Zt - u) ** 2, axis=1))
        centered = resid - (w @ resid) / w.sum()
        target = w * centered
        P[i], _, _, _ = np.linalg.lstsq(Zt, target, rcond=None)

    _, _, Vt = np.linalg.svd(P, full_matrices=False)
    A_hat = Vt[:d_prime]
    rows = ([] if beta_negligible else [beta]) + list(A_hat) + list(Vt[d_prime:])
    B = _gram_schmidt(rows, d_prime)
    return ReductionMap(B_hat=B, d_prime=d_prime, beta_hat=beta,
                        d=(int((-3 + math.isqrt(9 + 8 * D)) // 4)), D=D,
                        beta_negligible=bool(beta_negligible),
                        slope_matrix_norm=float(np.linalg.norm(P)))


def reduced_pair_features(rmap: ReductionMap):
    """Feature function (X, V) -> per-pair reduced variables for assembly."""

    def feature_fn(X: np.ndarray, V):
        N, d = X.shape
        Xi = np.repeat(X, N, axis=0)
        Xj = np.tile(X, (N, 1))
        xi = feature_map_batch(Xi, Xj) @ rmap.B_hat.T  # (N*N, d')
        xi = xi.reshape(N, N, rmap.d_prime)
        if rmap.d_prime == 1:
            return xi[:, :, 0]
        return xi

    return feature_fn


def learn_reduced_kernel(ds: TrajectoryDataset, rmap: ReductionMap,
                         space: HypothesisSpace | TensorProductSpace,
                         threads: int = 1) -> KernelEstimate:
    """Least-squares kernel estimate on the learned variables xi = B_hat z(x_i, x_j).

    Uses the full N-agent loss with phi(B_hat z) replacing phi(r) as the
    weight on the pairwise displacement; the two-agent case is a special case.
    """
    if rmap.d_prime not in (1, 2):
        raise ConfigError("reduced kernels support d_prime in {1, 2}")
    if getattr(space, "points_dim", 1) != rmap.d_prime:
        raise ConfigError("hypothesis space dimensionality does not match d_prime")
    system = assemble_normal_system(ds, space, threads=threads,
                                    feature_fn=reduced_pair_features(rmap))
    estimates, _ = solve(system)
    return estimates[0]
