"""Catalog of closed-form interaction kernels and system right-hand sides.

A kernel is a scalar function of pairwise distance with a declared support
radius; evaluation outside the support returns 0.  The right-hand-side maps
implement

  first order:   dx_i/dt = sum_{i' != i} (1/N_{c(i')}) phi_{c(i),c(i')}(r_ii') (x_i' - x_i)

  second order:  m_i dv_i/dt = F_i(x_i, v_i) + sum_{i' != i} (1/N_{c(i')})
                     [phi^E_{c(i),c(i')}(r_ii') (x_i' - x_i)
                      + phi^A_{c(i),c(i')}(r_ii') (v_i' - v_i)]

with r_ii' = |x_i' - x_i| and c(.) the agent-type function.  For K = 1 both
reduce to the familiar 1/N-averaged forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ORDER_FIRST,
    ORDER_SECOND,
    InitialDistribution,
    ParametricForce,
    SystemSpec,
    TypePartition,
    homogeneous_partition,
)
from .errors import ConfigError, EvaluationError

# coincident distinct agents evaluate singular kernels at max(r, EPS_DISTANCE)
EPS_DISTANCE = 1e-10

CATALOG_NAMES = ("opinion", "predator_prey", "power_law", "fwep", "constant")


@dataclass(frozen=True)
class KernelFunction:
    """Evaluable interaction kernel r -> phi(r) with declared support [0, R].

    ``s`` is the Hoelder-smoothness tag used by dimension selection;
    ``continuous`` steers the integrator choice (discontinuous kernels force
    fixed-step RK4).
    """

    fn: object
    R: float = math.inf
    s: float = 1.0
    continuous: bool = True
    name: str = ""

    def __call__(self, r):
        r_arr = np.asarray(r, dtype=float)
        out = np.zeros_like(r_arr)
        mask = r_arr <= self.R
        if np.any(mask):
            out[mask] = self.fn(r_arr[mask])
        if np.ndim(r) == 0:
            return float(out)
        return out


def zero_kernel() -> KernelFunction:
    return KernelFunction(fn=np.zeros_like, R=math.inf, name="zero")


def constant_kernel(c: float = 1.0, R: float = math.inf) -> KernelFunction:
    return KernelFunction(fn=lambda r: np.full_like(r, float(c)), R=R, name=f"constant({c})")


@dataclass(frozen=True)
class KernelSet:
    """Complete K x K grid of kernels per role: E always, A for second order."""

    E: tuple
    A: tuple | None = None

    @property
    def K(self) -> int:
        return len(self.E)

    def kernel(self, role: str, k1: int, k2: int) -> KernelFunction:
        grid = self.E if role == "E" else self.A
        return grid[k1][k2]

    @property
    def continuous(self) -> bool:
        grids = [self.E] + ([self.A] if self.A is not None else [])
        return all(k.continuous for g in grids for row in g for k in row)


def homogeneous_set(phi_e: KernelFunction, phi_a: KernelFunction | None = None) -> KernelSet:
    A = ((phi_a,),) if phi_a is not None else None
    return KernelSet(E=((phi_e,),), A=A)


def opinion_kernel() -> KernelFunction:
    """Piecewise-constant consensus kernel: 1 on [0, 1/sqrt(2)), 0.1 on [1/sqrt(2), 1]."""
    cut = 1.0 / math.sqrt(2.0)

    def fn(r):
        return np.where(r < cut, 1.0, np.where(r <= 1.0, 0.1, 0.0))

    return KernelFunction(fn=fn, R=1.0, s=1.0, continuous=False, name="opinion")


def fwep_kernels(R: float = math.inf) -> KernelSet:
    """Flocking kernels: cohesion phi_E(r) = 1, alignment phi_A(r) = (1+r^2)^(-1/2).

    ``R`` is the configured domain bound used as the declared support radius.
    """
    phi_e = KernelFunction(fn=lambda r: np.ones_like(r), R=R, name="fwep_E")
    phi_a = KernelFunction(fn=lambda r: (1.0 + r * r) ** -0.5, R=R, name="fwep_A")
    return homogeneous_set(phi_e, phi_a)


def _power(r, theta):
    # singularity guard: coincident distinct agents see max(r, EPS_DISTANCE)
    return np.maximum(r, EPS_DISTANCE) ** (-theta)


def power_law_kernel(theta: float = 2.0, R: float = math.inf) -> KernelFunction:
    return KernelFunction(fn=lambda r: _power(r, theta), R=R, name=f"power_law({theta})")


def predator_prey_kernels() -> KernelSet:
    """Two-type chase kernels (type 0 prey, type 1 predator).

    The constants are repository defaults: prey-prey 1 - r^-2, prey<-predator
    -2 r^-2, predator<-prey 3.5 r^-2, predator-predator 0.
    """
    phi_pp = KernelFunction(fn=lambda r: 1.0 - _power(r, 2.0), name="prey_prey")
    phi_pq = KernelFunction(fn=lambda r: -2.0 * _power(r, 2.0), name="prey_predator")
    phi_qp = KernelFunction(fn=lambda r: 3.5 * _power(r, 2.0), name="predator_prey")
    phi_qq = zero_kernel()
    return KernelSet(E=((phi_pp, phi_pq), (phi_qp, phi_qq)))


@dataclass(frozen=True)
class ModelPreset:
    """Catalog entry bundled with simulation defaults (initial law, horizon)."""

    name: str
    spec: SystemSpec
    kernels: KernelSet
    mu0: InitialDistribution
    mu0_v: InitialDistribution | None = None
    default_T: float = 5.0
    default_L: int = 50
    truth_params: dict = field(default_factory=dict)


def preset(name: str, **params) -> ModelPreset:
    """Named model with all defaults needed to generate a dataset.

    Supported names: opinion, predator_prey, power_law, fwep, constant.
    Unknown parameters raise; initial distributions and horizons are
    repository baselines, not literature values.
    """
    if name == "opinion":
        N = int(params.pop("N", 20))
        d = int(params.pop("d", 1))
        _reject_extra(name, params)
        spec = SystemSpec(order=ORDER_FIRST, N=N, d=d,
                          partition=homogeneous_partition(N), kernel_set=name)
        return ModelPreset(
            name=name, spec=spec, kernels=homogeneous_set(opinion_kernel()),
            mu0=InitialDistribution("uniform_box", {"low": 0.0, "high": 1.0}),
            default_T=10.0, default_L=100,
        )
    if name == "constant":
        N = int(params.pop("N", 10))
        d = int(params.pop("d", 1))
        c = float(params.pop("c", 1.0))
        _reject_extra(name, params)
        spec = SystemSpec(order=ORDER_FIRST, N=N, d=d,
                          partition=homogeneous_partition(N), kernel_set=name)
        return ModelPreset(
            name=name, spec=spec, kernels=homogeneous_set(constant_kernel(c)),
            mu0=InitialDistribution("uniform_box", {"low": 0.0, "high": 1.0}),
            default_T=3.0, default_L=30, truth_params={"c": c},
        )
    if name == "power_law":
        N = int(params.pop("N", 3))
        d = int(params.pop("d", 2))
        theta = float(params.pop("theta", 2.0))
        _reject_extra(name, params)
        spec = SystemSpec(order=ORDER_FIRST, N=N, d=d,
                          partition=homogeneous_partition(N), kernel_set=name)
        return ModelPreset(
            name=name, spec=spec, kernels=homogeneous_set(power_law_kernel(theta)),
            mu0=InitialDistribution("uniform_annulus", {"r_min": 0.5, "r_max": 1.5}),
            default_T=0.2, default_L=20, truth_params={"theta": theta},
        )
    if name == "predator_prey":
        N1 = int(params.pop("N1", 19))
        N2 = int(params.pop("N2", 1))
        d = int(params.pop("d", 2))
        _reject_extra(name, params)
        labels = np.concatenate([np.zeros(N1, dtype=int), np.ones(N2, dtype=int)])
        spec = SystemSpec(order=ORDER_FIRST, N=N1 + N2, d=d,
                          partition=TypePartition(labels=labels, K=2), kernel_set=name)
        return ModelPreset(
            name=name, spec=spec, kernels=predator_prey_kernels(),
            mu0=InitialDistribution("uniform_box", {"low": 0.0, "high": 1.0}),
            default_T=5.0, default_L=50,
        )
    if name == "fwep":
        N = int(params.pop("N", 20))
        d = int(params.pop("d", 2))
        _reject_extra(name, params)
        spec = SystemSpec(order=ORDER_SECOND, N=N, d=d,
                          partition=homogeneous_partition(N),
                          force=ParametricForce("none"), kernel_set=name)
        return ModelPreset(
            name=name, spec=spec, kernels=fwep_kernels(),
            mu0=InitialDistribution("uniform_box", {"low": 0.0, "high": 2.0}),
            mu0_v=InitialDistribution("uniform_box", {"low": -0.5, "high": 0.5}),
            default_T=2.0, default_L=6,
        )
    raise ConfigError(
        f"unknown model {name!r}; valid identifiers: {', '.join(CATALOG_NAMES)}"
    )


def _reject_extra(name, params):
    if params:
        raise ConfigError(f"unknown parameters for model {name!r}: {sorted(params)}")


def catalog(name: str, **params) -> tuple[SystemSpec, KernelSet]:
    """Return (SystemSpec template, KernelSet) for a named model."""
    p = preset(name, **params)
    return p.spec, p.kernels


def _displacements(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise displacements diffs[i, j] = x_j - x_i and distances."""
    diffs = X[None, :, :] - X[:, None, :]
    r = np.linalg.norm(diffs, axis=2)
    return diffs, r


def _kernel_weights(kernels: KernelSet, role: str, partition: TypePartition,
                    r: np.ndarray) -> np.ndarray:
    """Matrix W[i, j] = phi_{c(i),c(j)}(r_ij) / N_{c(j)}, zero diagonal."""
    N = r.shape[0]
    counts = partition.counts
    W = np.zeros_like(r)
    if partition.K == 1:
        W = kernels.kernel(role, 0, 0)(r) / counts[0]
    else:
        labels = partition.labels
        for k1 in range(partition.K):
            rows = labels == k1
            for k2 in range(partition.K):
                cols = labels == k2
                block = np.ix_(rows, cols)
                W[block] = kernels.kernel(role, k1, k2)(r[block]) / counts[k2]
    np.fill_diagonal(W, 0.0)
    return W


def rhs_first_order(X: np.ndarray, kernels: KernelSet,
                    partition: TypePartition) -> np.ndarray:
    """First-order RHS on the flat state (N*d,); returns the flat derivative."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise EvaluationError("non-finite state passed to rhs_first_order")
    N = partition.N
    Xm = X.reshape(N, -1)
    return rhs_first_order_matrix(Xm, kernels, partition).ravel()


def rhs_first_order_matrix(Xm: np.ndarray, kernels: KernelSet,
                           partition: TypePartition) -> np.ndarray:
    diffs, r = _displacements(Xm)
    W = _kernel_weights(kernels, "E", partition, r)
    return np.einsum("ij,ijd->id", W, diffs)


def rhs_second_order(X: np.ndarray, V: np.ndarray, kernels: KernelSet,
                     spec: SystemSpec) -> np.ndarray:
    """Second-order acceleration map on flat states; returns (N*d,)."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V))):
        raise EvaluationError("non-finite state passed to rhs_second_order")
    Xm = X.reshape(spec.N, spec.d)
    Vm = V.reshape(spec.N, spec.d)
    return rhs_second_order_matrix(Xm, Vm, kernels, spec).ravel()


def rhs_second_order_matrix(Xm: np.ndarray, Vm: np.ndarray, kernels: KernelSet,
                            spec: SystemSpec) -> np.ndarray:
    if kernels.A is None:
        raise ConfigError("second-order RHS needs kernels for both roles E and A")
    diffs, r = _displacements(Xm)
    vdiffs = Vm[None, :, :] - Vm[:, None, :]
    WE = _kernel_weights(kernels, "E", spec.partition, r)
    WA = _kernel_weights(kernels, "A", spec.partition, r)
    interaction = np.einsum("ij,ijd->id", WE, diffs) + np.einsum("ij,ijd->id", WA, vdiffs)
    total = spec.force(Xm, Vm) + interaction
    return total / spec.masses[:, None]
