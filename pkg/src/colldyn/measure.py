"""Empirical pairwise-distance measure, weighted L2 geometry, coercivity.

The measure rho is the uniform average of all pairwise distances r_ii'(t_l)
over (trajectory, snapshot, unordered pair); it defines the natural error
geometry through the weighted norm

    dist(f, g)^2 = integral |f(r) - g(r)|^2 r^2 drho(r),

discretized at histogram bin midpoints.  rho is kept as a fixed-bin histogram
(default 200 bins) so oracle comparisons stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import TrajectoryDataset
from .errors import DataError, DegenerateBasisError

DEFAULT_BINS = 200


@dataclass(frozen=True, eq=False)
class EmpiricalRho:
    """Histogram approximation of the pairwise-distance measure.

    Weights are nonnegative and sum to 1; ``pair_count`` records how many
    (m, l, pair) samples were accumulated, which lets per-type-pair
    histograms be recombined into the "all" histogram.
    """

    bin_edges: np.ndarray
    weights: np.ndarray
    type_pair: tuple | str = "all"
    pair_count: int = 0

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        edges.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "weights", w)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def support(self) -> tuple[float, float]:
        return float(self.bin_edges[0]), float(self.bin_edges[-1])


def _pair_distances(ds: TrajectoryDataset):
    """All pairwise distances, flattened over (m, l, i<j).

    Returns (distances, iu, ju) where iu, ju index the unordered pairs so
    callers can mask by agent type.
    """
    N = ds.N
    if N < 2:
        raise DataError("pairwise distances need at least 2 agents")
    iu, ju = np.triu_indices(N, k=1)
    # (M, L, n_pairs)
    diffs = ds.positions[:, :, ju, :] - ds.positions[:, :, iu, :]
    dists = np.linalg.norm(diffs, axis=-1)
    return dists, iu, ju


def _histogram(values: np.ndarray, bins: int, r_range, type_pair) -> EmpiricalRho:
    if r_range is None:
        lo, hi = float(values.min()), float(values.max())
    else:
        lo, hi = float(r_range[0]), float(r_range[1])
    if hi <= lo:
        pad = max(1e-9, abs(lo) * 1e-9)
        lo, hi = lo - pad, hi + pad
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    total = counts.sum()
    if total == 0:
        raise DataError("no distance samples fall in the requested range")
    return EmpiricalRho(bin_edges=edges, weights=counts / total,
                        type_pair=type_pair, pair_count=int(values.size))


def estimate_rho(ds: TrajectoryDataset, bins: int = DEFAULT_BINS,
                 per_type_pair: bool = False, r_range=None):
    """Histogram of pairwise distances, uniformly weighted over (m, l, pair).

    With ``per_type_pair`` a dict keyed by ordered type pairs (k1, k2) is
    returned; off-diagonal entries (k1, k2) and (k2, k1) share the same
    distance set, hence the same histogram.
    """
    if bins < 1:
        raise DataError("bins must be >= 1")
    dists, iu, ju = _pair_distances(ds)
    if not per_type_pair:
        return _histogram(dists.ravel(), bins, r_range, "all")
    labels = ds.spec.partition.labels
    K = ds.spec.K
    out: dict[tuple[int, int], EmpiricalRho] = {}
    for k1 in range(K):
        for k2 in range(k1, K):
            if k1 == k2:
                mask = (labels[iu] == k1) & (labels[ju] == k1)
            else:
                mask = ((labels[iu] == k1) & (labels[ju] == k2)) | (
                    (labels[iu] == k2) & (labels[ju] == k1))
            vals = dists[:, :, mask].ravel()
            if vals.size == 0:
                continue
            rho = _histogram(vals, bins, r_range, (k1, k2))
            out[(k1, k2)] = rho
            if k1 != k2:
                out[(k2, k1)] = EmpiricalRho(bin_edges=rho.bin_edges, weights=rho.weights,
                                             type_pair=(k2, k1), pair_count=rho.pair_count)
    return out


def support_radii(ds: TrajectoryDataset) -> dict[tuple[int, int], tuple[float, float]]:
    """Minimum and maximum observed pairwise distance per ordered type pair."""
    dists, iu, ju = _pair_distances(ds)
    labels = ds.spec.partition.labels
    K = ds.spec.K
    out: dict[tuple[int, int], tuple[float, float]] = {}
    for k1 in range(K):
        for k2 in range(k1, K):
            if k1 == k2:
                mask = (labels[iu] == k1) & (labels[ju] == k1)
            else:
                mask = ((labels[iu] == k1) & (labels[ju] == k2)) | (
                    (labels[iu] == k2) & (labels[ju] == k1))
            vals = dists[:, :, mask]
            if vals.size == 0:
                continue
            pair = (float(vals.min()), float(vals.max()))
            out[(k1, k2)] = pair
            out[(k2, k1)] = pair
    return out


def overall_radii(ds: TrajectoryDataset) -> tuple[float, float]:
    dists, _, _ = _pair_distances(ds)
    return float(dists.min()), float(dists.max())


def l2rho_distance(f, g, rho: EmpiricalRho) -> float:
    """Weighted distance (sum_b w_b |f(r_b) - g(r_b)|^2 r_b^2)^(1/2) at bin midpoints."""
    mids = rho.midpoints
    diff = np.asarray(f(mids), dtype=float) - np.asarray(g(mids), dtype=float)
    return float(np.sqrt(np.sum(rho.weights * diff * diff * mids * mids)))


def l2rho_norm(f, rho: EmpiricalRho) -> float:
    return l2rho_distance(f, lambda r: np.zeros_like(r), rho)


def restrict_mass(rho: EmpiricalRho, fraction: float) -> EmpiricalRho:
    """Keep the heaviest bins holding at least ``fraction`` of the mass, renormalized."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must be in (0, 1]")
    order = np.argsort(rho.weights)[::-1]
    cum = np.cumsum(rho.weights[order])
    keep_count = int(np.searchsorted(cum, fraction) + 1)
    keep = np.zeros_like(rho.weights, dtype=bool)
    keep[order[:keep_count]] = True
    w = np.where(keep, rho.weights, 0.0)
    w = w / w.sum()
    return EmpiricalRho(bin_edges=rho.bin_edges, weights=w,
                        type_pair=rho.type_pair, pair_count=rho.pair_count)


def basis_gram(space, rho: EmpiricalRho) -> np.ndarray:
    """Gram matrix of the basis in the weighted inner product of ``l2rho_distance``."""
    mids = rho.midpoints
    Psi = space.eval_basis(mids)
    w = rho.weights * mids * mids
    return Psi.T @ (w[:, None] * Psi)


def smallest_generalized_eigenvalue(A: np.ndarray, G: np.ndarray,
                                    dead_tol: float = 1e-12) -> float:
    """Smallest lambda with A v = lambda G v; G must be nondegenerate.

    Basis elements with (numerically) zero diagonal in G are dead on the
    measure's support and reported by index.
    """
    diag = np.diag(G)
    scale = diag.max(initial=0.0)
    dead = np.flatnonzero(diag <= dead_tol * max(scale, 1e-300))
    if scale == 0 or dead.size:
        raise DegenerateBasisError(
            f"basis elements {dead.tolist()} carry no mass on supp(rho)")
    try:
        vals = scipy.linalg.eigh(A, G, eigvals_only=True)
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateBasisError(f"measure Gram is singular: {exc}") from exc
    return float(vals[0])


def estimate_coercivity(ds: TrajectoryDataset, spaces, bins: int = DEFAULT_BINS,
                        threads: int = 1) -> float:
    """Empirical coercivity constant of the learning problem on the given basis.

    Computes the smallest generalized eigenvalue of (A, G_rho) where A is the
    empirical Gram of the loss bilinear form and G_rho the basis Gram in the
    weighted L2(rho) inner product (block diagonal over type pairs and roles).
    """
    from .estimator import assemble_normal_system, normalize_spaces

    spaces = normalize_spaces(spaces, ds.spec)
    system = assemble_normal_system(ds, spaces, threads=threads)
    per_pair = ds.spec.K > 1
    rho = estimate_rho(ds, bins=bins, per_type_pair=per_pair)
    G = np.zeros_like(system.A)
    for key, sl in system.blocks.items():
        k1, k2, _role = key
        rho_b = rho[(k1, k2)] if per_pair else rho
        G[sl, sl] = basis_gram(spaces[key], rho_b)
    return smallest_generalized_eigenvalue(system.A, G)
